"""Synthetic fixture generation: labeled texture patches, slides, lookup tables.

Every artifact is a pure function of the spec seed, so regenerating a dataset
produces byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInput

# planted-slide layout: one slide per dataset with a rectangle of the second
# texture composited over a background of the first
SLIDE_SIZE = 4096
PLANT_ORIGIN = 1024
PLANT_SIZE = 1024
DETECTION_PATCH = 512
PLANT_PROBABILITY = 0.95


@dataclass(frozen=True)
class TextureParams:
    """Procedural texture family: flat color + noise + optional stripes."""
    color: tuple[int, int, int]
    noise: int = 20
    stripe_period: int = 0  # 0 disables stripes
    stripe_amplitude: int = 40

    def render(self, rng: np.random.Generator, size: int) -> np.ndarray:
        img = np.empty((size, size, 3), dtype=np.float64)
        img[:] = self.color
        img += rng.uniform(-self.noise, self.noise, size=(size, size, 3))
        if self.stripe_period > 0:
            phase = rng.uniform(0, 2 * np.pi)
            wave = np.sin(2 * np.pi * np.arange(size) / self.stripe_period + phase)
            img += self.stripe_amplitude * wave[None, :, None]
        return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class FixtureSpec:
    seed: int
    patch_size: int
    textures: dict[str, TextureParams]
    counts: dict[str, int]
    split: float = 0.8

    def __post_init__(self):
        if self.patch_size < 8:
            raise InvalidInput("patch_size must be >= 8")
        if not self.textures:
            raise InvalidInput("at least one texture label is required")
        if set(self.counts) != set(self.textures):
            raise InvalidInput("counts must cover exactly the texture labels")
        if any(c < 1 for c in self.counts.values()):
            raise InvalidInput("counts must be >= 1")
        if not (0 < self.split < 1):
            raise InvalidInput("split must be in (0, 1)")

    @classmethod
    def from_json(cls, text: str) -> "FixtureSpec":
        obj = json.loads(text)
        textures = {
            label: TextureParams(
                color=tuple(t["color"]),
                noise=int(t.get("noise", 20)),
                stripe_period=int(t.get("stripe_period", 0)),
                stripe_amplitude=int(t.get("stripe_amplitude", 40)),
            )
            for label, t in obj["textures"].items()
        }
        return cls(
            seed=int(obj["seed"]),
            patch_size=int(obj["patch_size"]),
            textures=textures,
            counts={k: int(v) for k, v in obj["counts"].items()},
            split=float(obj.get("split", 0.8)),
        )


def generate_fixtures(spec: FixtureSpec, out_dir: str | Path) -> Path:
    """Write labeled patches, a planted slide, and engine lookup fixtures.

    Layout: <out>/<label>/{train,val}/patch_NNNN.npy, <out>/slide.ppm,
    <out>/tumor_oracle.jsonl (+ sidecar), <out>/dataset.json.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = sorted(spec.textures)

    manifest = {"seed": spec.seed, "patch_size": spec.patch_size, "split": spec.split,
                "labels": labels, "patches": {}}
    for li, label in enumerate(labels):
        texture = spec.textures[label]
        count = spec.counts[label]
        n_train = max(1, int(np.floor(count * spec.split)))
        for i in range(count):
            rng = np.random.default_rng([spec.seed, li, i])
            patch = texture.render(rng, spec.patch_size)
            part = "train" if i < n_train else "val"
            part_dir = out / label / part
            part_dir.mkdir(parents=True, exist_ok=True)
            np.save(part_dir / f"patch_{i:04d}.npy", patch)
        manifest["patches"][label] = {"total": count, "train": n_train,
                                      "val": count - n_train}

    planted = _write_slide(spec, out, labels)
    _write_lookup(out, planted)
    manifest["slide"] = {"image": "slide.ppm", "planted": sorted(planted),
                         "patch_size": DETECTION_PATCH,
                         "lookup": "tumor_oracle.json"}
    (out / "dataset.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return out


def _write_slide(spec: FixtureSpec, out: Path, labels: list[str]) -> set[tuple[int, int]]:
    """Background of the first texture with a planted block of the second."""
    rng = np.random.default_rng([spec.seed, 10_000])
    background = spec.textures[labels[0]]
    slide = background.render(rng, SLIDE_SIZE)
    if len(labels) > 1:
        block = spec.textures[labels[1]].render(rng, PLANT_SIZE)
        slide[PLANT_ORIGIN:PLANT_ORIGIN + PLANT_SIZE,
              PLANT_ORIGIN:PLANT_ORIGIN + PLANT_SIZE] = block
    with open(out / "slide.ppm", "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (SLIDE_SIZE, SLIDE_SIZE))
        slide.tofile(fh)
    planted = set()
    if len(labels) > 1:
        for dy in range(0, PLANT_SIZE, DETECTION_PATCH):
            for dx in range(0, PLANT_SIZE, DETECTION_PATCH):
                planted.add((PLANT_ORIGIN + dx, PLANT_ORIGIN + dy))
    return planted


def _write_lookup(out: Path, planted: set[tuple[int, int]]) -> None:
    lines = [json.dumps({"level": 0, "x": x, "y": y,
                         "values": [1.0 - PLANT_PROBABILITY, PLANT_PROBABILITY]})
             for x, y in sorted(planted)]
    lines.append(json.dumps({"default": True,
                             "values": [PLANT_PROBABILITY, 1.0 - PLANT_PROBABILITY]}))
    (out / "tumor_oracle.jsonl").write_text("\n".join(lines) + "\n")
    (out / "tumor_oracle.json").write_text(json.dumps({
        "backend": "lookup_table",
        "task": "tumor2",
        "input_size": DETECTION_PATCH,
        "fixture": "tumor_oracle.jsonl",
    }, sort_keys=True, indent=2) + "\n")
