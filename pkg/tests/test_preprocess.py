import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from patchdistill.errors import ConfigError, GeometryError
from patchdistill.preprocess import (
    PatchGrid,
    PreprocessConfig,
    cached_equalize,
    center_crop_to_tiling,
    clahe,
    equalize,
    histogram_equalize,
    make_patch_set,
    make_thumbnail,
    partition,
    reassemble,
)

cv2 = pytest.importorskip("cv2")


def _road(shape, seed=0):
    rng = np.random.default_rng(seed)
    ramp = np.linspace(0, 70, shape[1])[None, :]
    return np.clip(rng.normal(110, 25, shape) + ramp, 0, 255).astype(np.uint8)


class TestEqualize:
    def test_none_is_identity(self):
        img = _road((48, 64))
        out = equalize(img, PreprocessConfig(mode="none"))
        np.testing.assert_array_equal(out, img)
        assert out is not img

    def test_constant_image_stays_constant_under_regular_he(self):
        img = np.full((40, 30), 77, dtype=np.uint8)
        out = equalize(img, PreprocessConfig(mode="regular_he"))
        assert np.unique(out).size == 1

    def test_two_level_image_matches_cdf_oracle(self):
        img = np.array([[50, 200] * 8] * 6, dtype=np.uint8)
        out = equalize(img, PreprocessConfig(mode="regular_he"))
        # direct CDF: levels map to round(255 * (cdf(v) - cdf_min) / (N - cdf_min))
        n = img.size
        cdf = {v: int((img <= v).sum()) for v in (50, 200)}
        cdf_min = cdf[50]
        expect = {v: round(255 * (cdf[v] - cdf_min) / (n - cdf_min)) for v in (50, 200)}
        assert expect == {50: 0, 200: 255}
        for v, e in expect.items():
            assert set(np.unique(out[img == v])) == {e}

    @pytest.mark.parametrize("seed", range(5))
    def test_regular_he_matches_opencv(self, seed):
        img = _road((97, 131), seed)
        np.testing.assert_array_equal(histogram_equalize(img), cv2.equalizeHist(img))

    @pytest.mark.parametrize("shape", [(192, 256), (900, 1200), (100, 130), (37, 91), (64, 64)])
    @pytest.mark.parametrize("clip,tiles", [(2.0, (8, 8)), (0.5, (4, 6)), (40.0, (2, 3))])
    def test_clahe_matches_opencv(self, shape, clip, tiles):
        img = _road(shape, shape[0])
        ref = cv2.createCLAHE(clipLimit=clip, tileGridSize=tiles).apply(img)
        np.testing.assert_array_equal(clahe(img, clip, tiles), ref)

    def test_clahe_flattens_illumination_ramp(self):
        img = _road((192, 256))
        out = equalize(img, PreprocessConfig(mode="clahe"))
        left, right = img[:, :32].mean(), img[:, -32:].mean()
        eleft, eright = out[:, :32].mean(), out[:, -32:].mean()
        assert abs(eright - eleft) < abs(right - left)

    @settings(max_examples=40, deadline=None)
    @given(
        hnp.arrays(np.uint8, st.tuples(st.integers(8, 40), st.integers(8, 40))),
        st.sampled_from(["none", "regular_he", "clahe"]),
    )
    def test_dimensions_and_range_preserved(self, img, mode):
        out = equalize(img, PreprocessConfig(mode=mode, tile_grid=(2, 2)))
        assert out.shape == img.shape and out.dtype == np.uint8

    def test_color_image_keeps_shape(self):
        img = np.stack([_road((64, 64), s) for s in range(3)], axis=-1)
        out = equalize(img, PreprocessConfig(mode="clahe"))
        assert out.shape == img.shape and out.dtype == np.uint8

    def test_config_lists_every_problem(self):
        with pytest.raises(ConfigError) as info:
            PreprocessConfig(mode="gamma", clip_limit=0, tile_grid=(0, 8))
        assert len(info.value.problems) == 3

    def test_cache_written_and_reused(self, tmp_path):
        img = _road((64, 64))
        src = tmp_path / "a.png"
        cfg = PreprocessConfig()
        first = cached_equalize(img, cfg, src)
        cached = list(tmp_path.glob("a.*.clahe.png"))
        assert len(cached) == 1
        np.testing.assert_array_equal(cached_equalize(img, cfg, src), first)


class TestPartition:
    def test_default_geometry_gives_twelve(self):
        grid = PatchGrid.for_image(900, 1200, 300)
        assert (grid.rows, grid.cols, grid.m) == (3, 4, 12)

    def test_desk_geometry_gives_twelve(self):
        img = _road((192, 256))
        grid = PatchGrid.for_image(192, 256, 64)
        patches = partition(img, grid)
        assert patches.shape == (12, 64, 64)
        np.testing.assert_array_equal(reassemble(patches, grid), img)

    def test_single_patch_degenerate_case(self):
        ps = make_patch_set("x", _road((64, 64)), 1, 64)
        assert ps.m == 1

    def test_row_major_order(self):
        img = np.zeros((128, 192), dtype=np.uint8)
        img[64:, 128:] = 9  # bottom-right patch = (row 1, col 2) = index 5
        grid = PatchGrid.for_image(128, 192, 64)
        patches = partition(img, grid)
        assert [int(p.max()) for p in patches] == [0, 0, 0, 0, 0, 9]
        assert grid.position(5) == (1, 2)

    def test_non_divisible_rejected(self):
        with pytest.raises(GeometryError):
            PatchGrid.for_image(190, 256, 64)

    def test_crop_to_tiling(self):
        img = _road((200, 270))
        out = center_crop_to_tiling(img, 64)
        assert out.shape == (192, 256)
        np.testing.assert_array_equal(out, img[4:196, 7:263])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 9), st.booleans())
    def test_roundtrip_property(self, rows, cols, size, color):
        shape = (rows * size, cols * size) + ((3,) if color else ())
        img = np.random.default_rng(rows * 31 + cols).integers(0, 256, shape).astype(np.uint8)
        grid = PatchGrid.for_image(shape[0], shape[1], size)
        np.testing.assert_array_equal(reassemble(partition(img, grid), grid), img)


class TestThumbnail:
    def test_same_size_is_identity(self):
        img = _road((64, 64))
        np.testing.assert_array_equal(make_thumbnail(img, 64), img)

    def test_constant_image(self):
        out = make_thumbnail(np.full((192, 256), 140, dtype=np.uint8), 64)
        assert out.shape == (64, 64) and set(np.unique(out)) == {140}

    def test_checkerboard_averages(self):
        board = np.array([[0, 255], [255, 0]], dtype=np.uint8)
        out = make_thumbnail(board, 1)
        # analytic bilinear average of the four pixels is 127.5
        assert abs(int(out[0, 0]) - 127.5) <= 1

    def test_aspect_not_preserved(self):
        assert make_thumbnail(_road((192, 256)), 64).shape == (64, 64)
