import hashlib
import json

import numpy as np
import pytest

from rcctrainer.errors import InvalidInput
from rcctrainer.fixtures import (DETECTION_PATCH, PLANT_ORIGIN, PLANT_SIZE,
                                 FixtureSpec, TextureParams, generate_fixtures)

from conftest import two_class_spec


def tree_digest(root):
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()


class TestSpecValidation:
    def test_counts_must_cover_labels(self):
        with pytest.raises(InvalidInput):
            FixtureSpec(seed=0, patch_size=32,
                        textures={"a": TextureParams(color=(1, 2, 3))},
                        counts={"b": 5})

    def test_counts_at_least_one(self):
        with pytest.raises(InvalidInput):
            FixtureSpec(seed=0, patch_size=32,
                        textures={"a": TextureParams(color=(1, 2, 3))},
                        counts={"a": 0})

    def test_split_open_interval(self):
        for split in (0.0, 1.0):
            with pytest.raises(InvalidInput):
                FixtureSpec(seed=0, patch_size=32,
                            textures={"a": TextureParams(color=(1, 2, 3))},
                            counts={"a": 5}, split=split)

    def test_json_round_trip(self):
        spec = FixtureSpec.from_json(json.dumps({
            "seed": 7, "patch_size": 16,
            "textures": {"x": {"color": [10, 20, 30], "stripe_period": 4}},
            "counts": {"x": 3},
        }))
        assert spec.seed == 7
        assert spec.textures["x"].stripe_period == 4
        assert spec.split == 0.8


class TestGeneration:
    def test_same_seed_byte_identical(self, tmp_path):
        spec = two_class_spec(count=10)
        a = generate_fixtures(spec, tmp_path / "a")
        b = generate_fixtures(spec, tmp_path / "b")
        assert tree_digest(a) == tree_digest(b)

    def test_different_seed_differs(self, tmp_path):
        a = generate_fixtures(two_class_spec(seed=0, count=5), tmp_path / "a")
        b = generate_fixtures(two_class_spec(seed=1, count=5), tmp_path / "b")
        assert tree_digest(a) != tree_digest(b)

    def test_label_folders(self, tmp_path):
        spec = FixtureSpec(
            seed=0, patch_size=16,
            textures={f"sub{i}": TextureParams(color=(60 * i, 80, 90)) for i in range(3)},
            counts={f"sub{i}": 5 for i in range(3)},
        )
        out = generate_fixtures(spec, tmp_path / "d")
        folders = sorted(p.name for p in out.iterdir() if p.is_dir())
        assert folders == ["sub0", "sub1", "sub2"]

    def test_split_counts(self, tmp_path):
        out = generate_fixtures(two_class_spec(count=10), tmp_path / "d")
        assert len(list((out / "stroma" / "train").glob("*.npy"))) == 8
        assert len(list((out / "stroma" / "val").glob("*.npy"))) == 2

    def test_patch_contents(self, tmp_path):
        out = generate_fixtures(two_class_spec(count=2, patch_size=16), tmp_path / "d")
        patch = np.load(next((out / "tumor" / "train").glob("*.npy")))
        assert patch.shape == (16, 16, 3)
        assert patch.dtype == np.uint8

    def test_planted_lookup_coords(self, tmp_path):
        out = generate_fixtures(two_class_spec(count=2), tmp_path / "d")
        expected = {(PLANT_ORIGIN + dx, PLANT_ORIGIN + dy)
                    for dx in range(0, PLANT_SIZE, DETECTION_PATCH)
                    for dy in range(0, PLANT_SIZE, DETECTION_PATCH)}
        marked = set()
        for line in (out / "tumor_oracle.jsonl").read_text().splitlines():
            rec = json.loads(line)
            if rec.get("default"):
                assert rec["values"][1] == pytest.approx(0.05)
                continue
            assert rec["values"][1] == pytest.approx(0.95)
            marked.add((rec["x"], rec["y"]))
        assert marked == expected

    def test_slide_has_planted_block(self, tmp_path):
        out = generate_fixtures(two_class_spec(count=2), tmp_path / "d")
        data = (out / "slide.ppm").read_bytes()
        header_end = data.index(b"255\n") + 4
        slide = np.frombuffer(data[header_end:], dtype=np.uint8).reshape(4096, 4096, 3)
        inside = slide[PLANT_ORIGIN:PLANT_ORIGIN + 64, PLANT_ORIGIN:PLANT_ORIGIN + 64]
        outside = slide[:64, :64]
        # planted texture is darker than the background texture
        assert inside.mean() < outside.mean() - 20
