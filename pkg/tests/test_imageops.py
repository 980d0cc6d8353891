"""Compositing math, bands, pyramids, IoU, and PNG round trips."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from mattekit import imageops as io
from mattekit.errors import ConfigError, OverlapError, ShapeError


def rand_image(rng, h=8, w=8):
    return io.ImageRGB(rng.random((3, h, w), dtype=np.float32))


def rand_alpha(rng, h=8, w=8):
    return io.AlphaMatte(rng.random((h, w), dtype=np.float32))


class TestComposite:
    def test_alpha_one_returns_fg(self):
        rng = np.random.default_rng(0)
        fg, bg = rand_image(rng), rand_image(rng)
        out = io.composite(fg, bg, io.AlphaMatte(np.ones((8, 8), np.float32)))
        np.testing.assert_array_equal(out.planes, fg.planes)

    def test_alpha_zero_returns_bg(self):
        rng = np.random.default_rng(1)
        fg, bg = rand_image(rng), rand_image(rng)
        out = io.composite(fg, bg, io.AlphaMatte(np.zeros((8, 8), np.float32)))
        np.testing.assert_array_equal(out.planes, bg.planes)

    def test_quarter_blend_matches_loop_oracle(self):
        fg = io.ImageRGB(np.ones((3, 4, 4), np.float32))
        bg = io.ImageRGB(np.zeros((3, 4, 4), np.float32))
        alpha = io.AlphaMatte(np.full((4, 4), 0.25, np.float32))
        out = io.composite(fg, bg, alpha)
        want = oracles.composite_loops(fg.planes.astype(np.float64),
                                       bg.planes.astype(np.float64),
                                       alpha.plane.astype(np.float64))
        np.testing.assert_allclose(out.planes, want, atol=1e-7)
        np.testing.assert_allclose(out.planes, 0.25, atol=1e-7)

    def test_random_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        fg, bg, alpha = rand_image(rng, 5, 6), rand_image(rng, 5, 6), rand_alpha(rng, 5, 6)
        out = io.composite(fg, bg, alpha)
        want = oracles.composite_loops(fg.planes.astype(np.float64),
                                       bg.planes.astype(np.float64),
                                       alpha.plane.astype(np.float64))
        np.testing.assert_allclose(out.planes, want, atol=1e-6)

    def test_affine_in_alpha(self):
        rng = np.random.default_rng(3)
        fg, bg = rand_image(rng), rand_image(rng)
        a1, a2 = rand_alpha(rng), rand_alpha(rng)
        mid = io.AlphaMatte((a1.plane + a2.plane) / 2)
        lhs = io.composite(fg, bg, mid).planes
        rhs = (io.composite(fg, bg, a1).planes + io.composite(fg, bg, a2).planes) / 2
        np.testing.assert_allclose(lhs, rhs, atol=1e-6)

    def test_extent_mismatch_raises(self):
        rng = np.random.default_rng(4)
        with pytest.raises(ShapeError):
            io.composite(rand_image(rng, 4, 4), rand_image(rng, 4, 4),
                         rand_alpha(rng, 5, 5))


class TestCompositeMulti:
    def test_single_instance_equals_composite(self):
        rng = np.random.default_rng(5)
        fg, bg, alpha = rand_image(rng), rand_image(rng), rand_alpha(rng)
        multi = io.composite_multi([fg], [alpha], bg).planes
        single = io.composite(fg, bg, alpha).planes
        np.testing.assert_allclose(multi, single, atol=1e-9)

    def test_disjoint_supports_show_own_foreground(self):
        h = w = 8
        a1 = np.zeros((h, w), np.float32); a1[:, :3] = 1.0
        a2 = np.zeros((h, w), np.float32); a2[:, 5:] = 1.0
        fg1 = io.ImageRGB(np.full((3, h, w), 0.9, np.float32))
        fg2 = io.ImageRGB(np.full((3, h, w), 0.1, np.float32))
        bg = io.ImageRGB(np.full((3, h, w), 0.5, np.float32))
        out = io.composite_multi([fg1, fg2], [io.AlphaMatte(a1), io.AlphaMatte(a2)], bg)
        want = oracles.composite_multi_loops(
            [fg1.planes.astype(np.float64), fg2.planes.astype(np.float64)],
            [a1.astype(np.float64), a2.astype(np.float64)],
            bg.planes.astype(np.float64))
        np.testing.assert_allclose(out.planes, want, atol=1e-6)
        assert np.allclose(out.planes[:, :, :3], 0.9)
        assert np.allclose(out.planes[:, :, 5:], 0.1)
        assert np.allclose(out.planes[:, :, 3:5], 0.5)

    def test_all_zero_alphas_give_bg(self):
        rng = np.random.default_rng(6)
        bg = rand_image(rng)
        zero = io.AlphaMatte(np.zeros((8, 8), np.float32))
        out = io.composite_multi([rand_image(rng), rand_image(rng)],
                                 [zero, zero], bg)
        np.testing.assert_allclose(out.planes, bg.planes, atol=1e-7)

    def test_overlap_reports_worst_pixel(self):
        a = np.zeros((4, 4), np.float32)
        a[2, 3] = 0.8
        rng = np.random.default_rng(7)
        with pytest.raises(OverlapError, match=r"x=3, y=2"):
            io.composite_multi([rand_image(rng, 4, 4), rand_image(rng, 4, 4)],
                               [io.AlphaMatte(a), io.AlphaMatte(a)],
                               rand_image(rng, 4, 4))


class TestBinarize:
    def test_all_ones(self):
        mask = io.binarize(io.AlphaMatte(np.ones((4, 4), np.float32)), 0.5)
        assert mask.plane.all()

    def test_boundary_is_inclusive(self):
        mask = io.binarize(io.AlphaMatte(np.full((4, 4), 0.5, np.float32)), 0.5)
        assert mask.plane.all()

    def test_checkerboard(self):
        a = np.indices((4, 4)).sum(axis=0) % 2
        alpha = io.AlphaMatte(np.where(a == 1, 0.8, 0.2).astype(np.float32))
        mask = io.binarize(alpha, 0.5)
        np.testing.assert_array_equal(mask.plane, a.astype(np.uint8))


class TestTransitionBand:
    def test_binary_radius_zero_is_boundary(self):
        plane = np.zeros((8, 8), np.float32)
        plane[2:6, 2:6] = 1.0
        band = io.transition_band(io.AlphaMatte(plane), radius=0)
        want = oracles.band_bruteforce(plane, 0, 0.01, 0.99)
        np.testing.assert_array_equal(band.plane, want)

    def test_all_zero_alpha_empty_band(self):
        alpha = io.AlphaMatte(np.zeros((8, 8), np.float32))
        for r in (0, 2, 5):
            assert io.transition_band(alpha, radius=r).area() == 0

    def test_soft_disk_rim_dilated_matches_bruteforce(self):
        h = w = 24
        yy, xx = np.mgrid[:h, :w]
        dist = np.sqrt((yy - 12.0) ** 2 + (xx - 12.0) ** 2)
        plane = np.clip((8.0 - dist) / 3.0, 0.0, 1.0).astype(np.float32)
        band = io.transition_band(io.AlphaMatte(plane), radius=2)
        want = oracles.band_bruteforce(plane, 2, 0.01, 0.99)
        np.testing.assert_array_equal(band.plane, want)

    def test_monotone_in_radius(self):
        rng = np.random.default_rng(8)
        plane = (rng.random((16, 16)) > 0.5).astype(np.float32)
        prev = io.transition_band(io.AlphaMatte(plane), radius=0).plane
        for r in (1, 2, 4):
            cur = io.transition_band(io.AlphaMatte(plane), radius=r).plane
            assert np.all(cur >= prev)
            prev = cur

    def test_dilate_matches_bruteforce(self):
        rng = np.random.default_rng(9)
        mask = io.BinaryMask((rng.random((12, 12)) > 0.85).astype(np.uint8))
        for r in (1, 2, 3):
            got = io.dilate_disk(mask, r).plane
            want = oracles.dilate_bruteforce(mask.plane, r)
            np.testing.assert_array_equal(got, want)


class TestPyramid:
    def test_constant_plane_zero_diffs(self):
        alpha = io.AlphaMatte(np.full((32, 32), 0.6, np.float32))
        pyr = io.laplacian_pyramid(alpha, 3)
        for diff in pyr.diffs:
            np.testing.assert_allclose(diff, 0.0, atol=1e-12)
        np.testing.assert_allclose(pyr.base, 0.6, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_roundtrip_random(self, seed):
        rng = np.random.default_rng(seed)
        alpha = io.AlphaMatte(rng.random((64, 64), dtype=np.float32))
        pyr = io.laplacian_pyramid(alpha, 4)
        rec = io.reconstruct(pyr)
        assert np.abs(rec - alpha.plane.astype(np.float64)).max() < 1e-6

    def test_single_level(self):
        rng = np.random.default_rng(11)
        alpha = io.AlphaMatte(rng.random((10, 10), dtype=np.float32))
        pyr = io.laplacian_pyramid(alpha, 1)
        assert len(pyr.diffs) == 1
        rec = io.reconstruct(pyr)
        assert np.abs(rec - alpha.plane.astype(np.float64)).max() < 1e-6

    def test_odd_extents_roundtrip(self):
        rng = np.random.default_rng(12)
        alpha = io.AlphaMatte(rng.random((21, 13), dtype=np.float32))
        pyr = io.laplacian_pyramid(alpha, 2)
        rec = io.reconstruct(pyr)
        assert np.abs(rec - alpha.plane.astype(np.float64)).max() < 1e-6

    def test_too_small_raises(self):
        with pytest.raises(ConfigError):
            io.laplacian_pyramid(io.AlphaMatte(np.zeros((8, 8), np.float32)), 4)

    def test_blur_matrix_matches_direct_reflect101_loops(self):
        from mattekit import _sepmat
        rng = np.random.default_rng(13)
        plane = rng.random((7, 7))
        got = _sepmat.blur5_matrix(7) @ plane @ _sepmat.blur5_matrix(7).T
        k = _sepmat.BINOMIAL5
        want = np.zeros_like(plane)
        for y in range(7):
            for x in range(7):
                acc = 0.0
                for i in range(5):
                    for j in range(5):
                        yy = _sepmat.reflect101_index(y - 2 + i, 7)
                        xx = _sepmat.reflect101_index(x - 2 + j, 7)
                        acc += k[i] * k[j] * plane[yy, xx]
                want[y, x] = acc
        np.testing.assert_allclose(got, want, rtol=1e-12)


class TestIoU:
    def test_identical_nonempty(self):
        m = io.BinaryMask(np.eye(4, dtype=np.uint8))
        assert io.iou(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4), np.uint8); a[0, 0] = 1
        b = np.zeros((4, 4), np.uint8); b[3, 3] = 1
        assert io.iou(io.BinaryMask(a), io.BinaryMask(b)) == 0.0

    def test_adjacent_blocks_share_column(self):
        a = np.zeros((4, 6), np.uint8); a[1:3, 1:3] = 1
        b = np.zeros((4, 6), np.uint8); b[1:3, 2:4] = 1
        got = io.iou(io.BinaryMask(a), io.BinaryMask(b))
        want = oracles.iou_count(a, b)
        assert got == pytest.approx(want)
        assert got == pytest.approx(2 / 6, abs=1e-9)

    def test_box_vs_mask_rasterizes(self):
        m = np.zeros((8, 8), np.uint8); m[2:4, 2:4] = 1
        assert io.iou(io.Box(2, 2, 4, 4), io.BinaryMask(m)) == 1.0

    def test_box_vs_box_analytic(self):
        assert io.iou(io.Box(0, 0, 2, 2), io.Box(1, 0, 3, 2)) == pytest.approx(2 / 6)

    def test_empty_empty_is_zero(self):
        z = io.BinaryMask(np.zeros((4, 4), np.uint8))
        assert io.iou(z, z) == 0.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 16 - 1), st.integers(0, 2 ** 16 - 1))
    def test_symmetric_and_bounded(self, sa, sb):
        a = (np.random.default_rng(sa).random((6, 6)) > 0.5).astype(np.uint8)
        b = (np.random.default_rng(sb).random((6, 6)) > 0.5).astype(np.uint8)
        ma, mb = io.BinaryMask(a), io.BinaryMask(b)
        assert io.iou(ma, mb) == io.iou(mb, ma)
        assert 0.0 <= io.iou(ma, mb) <= 1.0
        if np.array_equal(a, b) and a.sum():
            assert io.iou(ma, mb) == 1.0


class TestBoxType:
    def test_tight_bbox_of_soft_disk(self):
        h = w = 33
        yy, xx = np.mgrid[:h, :w]
        cx = cy = 16
        dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        plane = np.clip((10.0 - dist) / 2.0, 0.0, 1.0).astype(np.float32)
        box = io.Box.tight_around(io.AlphaMatte(plane))
        ys, xs = np.nonzero(plane > 0)
        assert (box.x0, box.y0, box.x1, box.y1) == \
            (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)

    def test_degenerate_rejected(self):
        with pytest.raises(ValueError):
            io.Box(3, 0, 3, 5)


class TestPngIO:
    def test_image_roundtrip(self, tmp_path):
        rng = np.random.default_rng(14)
        img = io.ImageRGB(np.round(rng.random((3, 9, 7)) * 255).astype(np.float32) / 255)
        path = tmp_path / "img.png"
        io.write_image(path, img)
        back = io.read_image(path)
        np.testing.assert_allclose(back.planes, img.planes, atol=1 / 255 / 2)

    def test_alpha_16bit_roundtrip(self, tmp_path):
        rng = np.random.default_rng(15)
        alpha = io.AlphaMatte(rng.random((6, 6), dtype=np.float32))
        path = tmp_path / "a.png"
        io.write_alpha(path, alpha, depth=16)
        back = io.read_alpha(path)
        np.testing.assert_allclose(back.plane, alpha.plane, atol=1 / 65535)

    def test_alpha_8bit_roundtrip(self, tmp_path):
        alpha = io.AlphaMatte(np.linspace(0, 1, 16, dtype=np.float32).reshape(4, 4))
        path = tmp_path / "a8.png"
        io.write_alpha(path, alpha, depth=8)
        back = io.read_alpha(path)
        np.testing.assert_allclose(back.plane, alpha.plane, atol=1 / 255 / 2 + 1e-6)

    def test_mask_roundtrip(self, tmp_path):
        mask = io.BinaryMask((np.random.default_rng(16).random((5, 5)) > 0.5)
                             .astype(np.uint8))
        path = tmp_path / "m.png"
        io.write_mask(path, mask)
        np.testing.assert_array_equal(io.read_mask(path).plane, mask.plane)
