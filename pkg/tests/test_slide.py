import numpy as np
import pytest

from rccpipe.errors import InvalidInput
from rccpipe.slide import (BinaryMask, PatchCoordinate, grid_patches, ingest_base_image,
                           load_pyramid, read_region, save_pyramid, tissue_mask)

from conftest import STAIN, WHITE, flat_slide


def gray(v, w, h):
    return np.full((h, w, 3), v, dtype=np.uint8)


class TestIngest:
    def test_constant_gray_two_levels(self):
        pyr = ingest_base_image(gray(77, 1024, 1024), 0.5, 40, tile_size=512)
        assert [(l.width, l.height) for l in pyr.levels] == [(1024, 1024), (512, 512)]
        assert np.all(pyr.levels[1].pixels == 77)

    def test_ceil_halving_dimensions(self):
        pyr = ingest_base_image(gray(10, 1000, 600), 0.5, 40, tile_size=512)
        assert [(l.width, l.height) for l in pyr.levels] == [(1000, 600), (500, 300)]

    def test_round_half_up_box_average(self):
        # (0+0+0+255)/4 = 63.75 -> 64
        from rccpipe.slide import _downsample_2x2
        image = np.zeros((2, 2, 3), dtype=np.uint8)
        image[1, 1] = 255
        down = _downsample_2x2(image)
        assert down.shape == (1, 1, 3)
        assert np.all(down == 64)

    def test_mpp_doubles_per_level(self):
        pyr = ingest_base_image(gray(10, 2048, 2048), 0.25, 40, tile_size=512)
        assert [pyr.mpp_at(i) for i in range(3)] == [0.25, 0.5, 1.0]
        assert pyr.magnification_at(2) == 10

    def test_zero_area_rejected(self):
        with pytest.raises(InvalidInput):
            ingest_base_image(np.zeros((0, 5, 3), dtype=np.uint8), 0.5, 40)

    def test_bad_mpp_rejected(self):
        with pytest.raises(InvalidInput):
            ingest_base_image(gray(1, 8, 8), 0.0, 40)

    def test_bad_tile_size_rejected(self):
        with pytest.raises(InvalidInput):
            ingest_base_image(gray(1, 8, 8), 0.5, 40, tile_size=100)

    def test_level0_identical_to_input(self):
        rng = np.random.default_rng(0)
        image = rng.integers(0, 256, (300, 200, 3), dtype=np.uint8)
        pyr = ingest_base_image(image, 0.5, 40, tile_size=128)
        assert np.array_equal(pyr.levels[0].pixels, image)

    def test_downsampling_conserves_mean(self):
        rng = np.random.default_rng(1)
        image = rng.integers(0, 256, (512, 512, 3), dtype=np.uint8)
        pyr = ingest_base_image(image, 0.5, 40, tile_size=64)
        for a, b in zip(pyr.levels, pyr.levels[1:]):
            assert abs(a.pixels.mean() - b.pixels.mean()) <= 1.0


class TestReadRegion:
    def test_identity_crop(self):
        rng = np.random.default_rng(2)
        image = rng.integers(0, 256, (1024, 1024, 3), dtype=np.uint8)
        pyr = ingest_base_image(image, 0.5, 40, tile_size=512)
        patch = read_region(pyr, PatchCoordinate(0, 100, 200, 64))
        assert np.array_equal(patch.pixels, image[200:264, 100:164])
        assert not patch.partial
        assert patch.mpp == 0.5

    def test_straddles_tile_boundaries(self):
        rng = np.random.default_rng(3)
        image = rng.integers(0, 256, (1200, 1200, 3), dtype=np.uint8)
        pyr = ingest_base_image(image, 0.5, 40, tile_size=512)
        # crosses the 512 boundary in both axes
        patch = read_region(pyr, PatchCoordinate(0, 480, 480, 100))
        assert np.array_equal(patch.pixels, image[480:580, 480:580])

    def test_out_of_bounds_zero_padded(self):
        image = gray(200, 100, 100)
        pyr = ingest_base_image(image, 0.5, 40, tile_size=64)
        patch = read_region(pyr, PatchCoordinate(0, 60, 0, 64))
        assert patch.partial
        assert np.all(patch.pixels[:, :40] == 200)
        assert np.all(patch.pixels[:, 40:] == 0)

    def test_nonexistent_level(self):
        pyr = ingest_base_image(gray(1, 64, 64), 0.5, 40, tile_size=64)
        with pytest.raises(InvalidInput):
            read_region(pyr, PatchCoordinate(5, 0, 0, 16))


class TestTissueMask:
    def test_white_is_background(self):
        pyr = ingest_base_image(flat_slide(256, 256, WHITE), 0.5, 40, tile_size=256)
        mask = tissue_mask(pyr, 0, 0.15, stride=64)
        assert not mask.grid.any()

    def test_stain_is_tissue(self):
        # mean OD of (64, 32, 96) = mean(-log10(65/256), -log10(33/256), -log10(97/256))
        pyr = ingest_base_image(flat_slide(256, 256, (64, 32, 96)), 0.5, 40, tile_size=256)
        expected = np.mean([-np.log10(65 / 256), -np.log10(33 / 256), -np.log10(97 / 256)])
        assert expected >= 0.15
        mask = tissue_mask(pyr, 0, 0.15, stride=64)
        assert mask.grid.all()

    def test_half_stained_fraction(self):
        image = flat_slide(512, 512, WHITE, rects=[(0, 0, 512, 256, STAIN)])
        pyr = ingest_base_image(image, 0.5, 40, tile_size=512)
        mask = tissue_mask(pyr, 0, 0.15, stride=64)
        frac = mask.grid.mean()
        assert abs(frac - 0.5) <= 1 / mask.grid.shape[0]

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(4)
        image = rng.integers(0, 256, (256, 256, 3), dtype=np.uint8)
        pyr = ingest_base_image(image, 0.5, 40, tile_size=256)
        lo = tissue_mask(pyr, 0, 0.1, stride=32).grid
        hi = tissue_mask(pyr, 0, 0.5, stride=32).grid
        assert not np.any(hi & ~lo)

    def test_threshold_domain(self):
        pyr = ingest_base_image(gray(1, 64, 64), 0.5, 40, tile_size=64)
        with pytest.raises(InvalidInput):
            tissue_mask(pyr, 0, 0.0)


class TestGridPatches:
    def test_exact_tiling(self, tissue_pyramid):
        mask = tissue_mask(tissue_pyramid, 0, 0.15, stride=64)
        coords = grid_patches(tissue_pyramid, 0.5, 512, mask)
        assert [(c.x, c.y) for c in coords] == [(0, 0), (512, 0), (0, 512), (512, 512)]

    def test_background_slide_empty(self):
        pyr = ingest_base_image(flat_slide(1024, 1024, WHITE), 0.5, 40, tile_size=512)
        mask = tissue_mask(pyr, 0, 0.15, stride=64)
        assert grid_patches(pyr, 0.5, 512, mask) == []

    def test_single_tissue_square(self):
        image = flat_slide(1024, 1024, WHITE, rects=[(512, 0, 512, 512, STAIN)])
        pyr = ingest_base_image(image, 0.5, 40, tile_size=512)
        mask = tissue_mask(pyr, 0, 0.15, stride=64)
        coords = grid_patches(pyr, 0.5, 512, mask)
        assert [(c.x, c.y) for c in coords] == [(512, 0)]

    def test_wrong_mpp_rejected(self, tissue_pyramid):
        mask = tissue_mask(tissue_pyramid, 0, 0.15, stride=64)
        with pytest.raises(InvalidInput):
            grid_patches(tissue_pyramid, 0.7, 512, mask)

    def test_deterministic_sorted_nonoverlapping(self, tissue_pyramid):
        mask = tissue_mask(tissue_pyramid, 0, 0.15, stride=64)
        a = grid_patches(tissue_pyramid, 0.5, 256, mask)
        b = grid_patches(tissue_pyramid, 0.5, 256, mask)
        assert a == b
        keys = [(c.y, c.x) for c in a]
        assert keys == sorted(keys)
        rects = {(c.x, c.y) for c in a}
        assert len(rects) == len(a)

    def test_grid_at_coarser_level(self, tissue_pyramid):
        mask = tissue_mask(tissue_pyramid, 1, 0.15, stride=64)
        coords = grid_patches(tissue_pyramid, 1.0, 256, mask)
        assert all(c.level == 1 for c in coords)
        assert len(coords) == 4


class TestPersistence:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        image = rng.integers(0, 256, (700, 900, 3), dtype=np.uint8)
        pyr = ingest_base_image(image, 0.25, 40, tile_size=256,
                                slide_id="s1", case_id="c1",
                                ground_truth={"subtype": "ccRCC", "isup_grade": 2})
        save_pyramid(pyr, tmp_path / "pyr")
        loaded = load_pyramid(tmp_path / "pyr")
        assert loaded.slide_id == "s1"
        assert loaded.ground_truth == {"subtype": "ccRCC", "isup_grade": 2}
        assert len(loaded.levels) == len(pyr.levels)
        for a, b in zip(pyr.levels, loaded.levels):
            assert np.array_equal(a.pixels, b.pixels)

    def test_tile_files_exact_size(self, tmp_path):
        pyr = ingest_base_image(np.zeros((300, 300, 3), dtype=np.uint8), 0.5, 40, tile_size=256)
        save_pyramid(pyr, tmp_path / "pyr")
        tile = (tmp_path / "pyr" / "L0" / "1_1.rgb").read_bytes()
        assert len(tile) == 256 * 256 * 3
