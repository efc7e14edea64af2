import numpy as np
import pytest

from splatstyle import datasets
from splatstyle import features as feat
from splatstyle import stylize as sty
from splatstyle.rasterizer import backward, render
from splatstyle.scene import look_at_camera
from conftest import random_scene


def analytic_two_plane(cam):
    return datasets.render_two_plane_view(cam)


class TestSynthesizePseudoView:
    def test_identity_warp(self, rng):
        cam = look_at_camera([0.2, 0.1, -2.0], [0, 0, 0], width=24, height=24,
                             focal=26)
        img, depth = analytic_two_plane(cam)
        pv = sty.synthesize_pseudo_view(img, depth, cam, cam, depth)
        np.testing.assert_array_equal(pv.mask, depth > 0)
        np.testing.assert_allclose(pv.image[pv.mask], img[pv.mask], atol=1e-9)

    def test_zero_depth_empty_mask(self):
        cam = look_at_camera([0, 0, -2.0], [0, 0, 0], width=8, height=8, focal=10)
        pv = sty.synthesize_pseudo_view(np.ones((8, 8, 3)), np.zeros((8, 8)),
                                        cam, cam, np.ones((8, 8)))
        assert not pv.mask.any()

    def test_occlusion_band_masked(self):
        # Foreground square occludes background; sideways camera shift leaves
        # the disoccluded band unsupervised.  Exact depths from the analytic
        # two-plane scene serve as the oracle.
        ref_cam = look_at_camera([0.0, 0, -2.0], [0, 0, 0], width=48, height=48,
                                 focal=52)
        tgt_cam = look_at_camera([0.7, 0, -1.9], [0.1, 0, 0], width=48, height=48,
                                 focal=52)
        ref_img, ref_depth = analytic_two_plane(ref_cam)
        tgt_img, tgt_depth = analytic_two_plane(tgt_cam)
        pv = sty.synthesize_pseudo_view(ref_img, ref_depth, ref_cam,
                                        tgt_cam, tgt_depth)
        fg = np.isclose(tgt_img[:, :, 0], 0.9, atol=0.01)
        bg = (tgt_depth > 0) & ~fg
        # background points hidden behind the square in the reference view
        # must be masked out in the target
        hidden = np.zeros((48, 48), dtype=bool)
        jj, ii = np.meshgrid(np.arange(48, dtype=float), np.arange(48, dtype=float))
        dirs = np.stack([(jj - tgt_cam.cx) / tgt_cam.fx,
                         (ii - tgt_cam.cy) / tgt_cam.fy,
                         np.ones_like(jj)], axis=-1) @ tgt_cam.rotation
        C = tgt_cam.position
        t = -C[2] / dirs[..., 2]
        wx = C[0] + t * dirs[..., 0]
        wy = C[1] + t * dirs[..., 1]
        # reproject background world points into the reference camera and
        # test against the foreground square footprint
        pts = np.stack([wx, wy, np.zeros_like(wx)], axis=-1).reshape(-1, 3)
        pc = ref_cam.world_to_cam_points(pts)
        scale = (-0.6 - ref_cam.position[2]) / (0.0 - ref_cam.position[2])
        xy_at_fg = pts[:, :2] * scale + ref_cam.position[:2][None, :] * (1 - scale)
        occluded = (np.abs(xy_at_fg[:, 0]) <= 0.35) & (np.abs(xy_at_fg[:, 1]) <= 0.35)
        occluded = occluded.reshape(48, 48) & bg
        assert occluded.sum() > 20
        assert pv.mask[occluded].mean() < 0.05
        # most directly-visible background pixels stay supervised
        visible_bg = bg & ~occluded
        assert pv.mask[visible_bg].mean() > 0.5
        masked_err = np.abs(pv.image[pv.mask] - tgt_img[pv.mask]).mean()
        assert masked_err < 0.05

    def test_resolution_mismatch(self):
        cam = look_at_camera([0, 0, -2.0], [0, 0, 0], width=8, height=8, focal=10)
        with pytest.raises(ValueError):
            sty.synthesize_pseudo_view(np.ones((9, 8, 3)), np.zeros((8, 8)),
                                       cam, cam, np.zeros((8, 8)))


class TestWarpDepth:
    def test_normalizes_partial_coverage(self, rng):
        scene = random_scene(rng, 20, opacity_range=(1.5, 3.0))
        cam = look_at_camera([0, 0, -2.0], [0, 0, 0], width=16, height=16, focal=20)
        out = render(scene, cam)
        wd = sty.warp_depth(out)
        cov = 1.0 - out.final_transmittance
        good = cov >= sty.MIN_DEPTH_COVERAGE
        np.testing.assert_allclose(wd[good], out.depth[good] / cov[good])
        assert np.all(wd[~good] == 0.0)


class TestLosses:
    def test_loss_view_identity(self, rng):
        img = rng.uniform(0, 1, (8, 8, 3))
        mask = rng.uniform(size=(8, 8)) > 0.5
        pv = sty.PseudoView(img, mask, None)
        val, grad = sty.loss_view(img, pv)
        assert val == 0.0
        assert np.all(grad == 0)

    def test_loss_view_constant_offset(self, rng):
        img = rng.uniform(0.2, 0.7, (8, 8, 3))
        mask = np.zeros((8, 8), dtype=bool)
        mask[2:5, 3:7] = True
        pv = sty.PseudoView(img, mask, None)
        val, grad = sty.loss_view(img + 0.1, pv)
        assert val == pytest.approx(0.1, rel=1e-12)
        assert np.all(grad[~mask] == 0)

    def test_loss_view_empty_mask(self, rng):
        pv = sty.PseudoView(np.zeros((4, 4, 3)), np.zeros((4, 4), bool), None)
        val, grad = sty.loss_view(rng.uniform(size=(4, 4, 3)), pv)
        assert val == 0.0 and np.all(grad == 0)

    def test_loss_view_matches_masked_sum_oracle(self, rng):
        a = rng.uniform(0, 1, (10, 10, 3))
        b = rng.uniform(0, 1, (10, 10, 3))
        mask = rng.uniform(size=(10, 10)) > 0.4
        pv = sty.PseudoView(b, mask, None)
        val, _ = sty.loss_view(a, pv)
        expected = np.abs((a - b)[mask]).sum() / (mask.sum() * 3)
        assert val == pytest.approx(expected, rel=1e-9)

    def test_loss_depth(self, rng):
        d = rng.uniform(0, 3, (6, 6))
        assert sty.loss_depth(d, d)[0] == 0.0
        assert sty.loss_depth(d + 0.2, d)[0] == pytest.approx(0.2)
        e = rng.uniform(0, 3, (6, 6))
        assert sty.loss_depth(d, e)[0] == pytest.approx(np.abs(d - e).mean())

    def test_loss_rec(self, rng):
        a = rng.uniform(0, 1, (6, 6, 3))
        assert sty.loss_rec(a, a)[0] == 0.0
        assert sty.loss_rec(a + 0.3, a)[0] == pytest.approx(0.3)
        b = rng.uniform(0, 1, (6, 6, 3))
        assert sty.loss_rec(a, b)[0] == pytest.approx(np.abs(a - b).mean())

    def test_total_loss_zero(self):
        assert sty.total_loss({}, sty.LossWeights()) == 0.0

    def test_total_loss_default_weights(self):
        parts = dict(rec=1.0, depth=1.0, view=1.0, tcm=1.0, color=1.0)
        assert sty.total_loss(parts, sty.LossWeights()) == pytest.approx(29.0)

    def test_total_loss_dot_product(self, rng):
        parts = {k: float(v) for k, v in
                 zip(("rec", "depth", "view", "tcm", "color"), rng.uniform(0, 2, 5))}
        w = sty.LossWeights(*rng.uniform(0, 3, 5))
        expected = (w.rec * parts["rec"] + w.depth * parts["depth"]
                    + w.view * parts["view"] + w.tcm * parts["tcm"]
                    + w.color * parts["color"])
        assert sty.total_loss(parts, w) == pytest.approx(expected)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            sty.LossWeights(rec=-1.0)


class TestLossGradientsThroughRenderer:
    """Finite differences of each stylization loss w.r.t. splat parameters,
    through the full render -> loss chain."""

    def _fd_check(self, rng, loss_and_grads, n=6, tol=2e-3):
        scene = random_scene(rng, n, opacity_range=(-1.0, 1.0))
        cam = look_at_camera([0, 0, -2.0], [0, 0, 0], width=24, height=24, focal=26)

        def full_loss(s):
            out = render(s, cam)
            return loss_and_grads(out)[0]

        out = render(scene, cam)
        _, dl_color, dl_depth = loss_and_grads(out)
        g = backward(scene, cam, dl_color, dl_depth, out)
        h = 1e-4
        checked = 0
        for arr, ganl in ((scene.positions, g.d_position),
                          (scene.colors_dc, g.d_color_dc),
                          (scene.opacity_logits[:, None], g.d_opacity_logit[:, None])):
            flat = arr.reshape(n, -1)
            ga = ganl.reshape(n, -1)
            for i in range(0, n, 2):
                for j in range(flat.shape[1]):
                    orig = flat[i, j]
                    flat[i, j] = orig + h
                    scene.mark_mutated()
                    lp = full_loss(scene)
                    flat[i, j] = orig - h
                    scene.mark_mutated()
                    lm = full_loss(scene)
                    flat[i, j] = orig
                    scene.mark_mutated()
                    fd = (lp - lm) / (2 * h)
                    if max(abs(fd), abs(ga[i, j])) < 1e-9:
                        continue
                    assert abs(ga[i, j] - fd) <= tol * max(abs(fd), abs(ga[i, j]), 1e-6)
                    checked += 1
        assert checked > 10

    def test_rec_gradient(self, rng):
        target = rng.uniform(0.2, 0.8, (24, 24, 3)) * 3  # keep diffs off zero

        def fn(out):
            val, grad = sty.loss_rec(out.color, target)
            return val, grad, np.zeros((24, 24))
        self._fd_check(rng, fn)

    def test_depth_gradient(self, rng):
        target = rng.uniform(3, 6, (24, 24))

        def fn(out):
            val, grad = sty.loss_depth(out.depth, target)
            return val, np.zeros((24, 24, 3)), grad
        self._fd_check(rng, fn)

    def test_view_gradient(self, rng):
        mask = rng.uniform(size=(24, 24)) > 0.3
        pv = sty.PseudoView(rng.uniform(1.5, 2.0, (24, 24, 3)), mask, None)

        def fn(out):
            val, grad = sty.loss_view(out.color, pv)
            return val, grad, np.zeros((24, 24))
        self._fd_check(rng, fn)

    def test_color_gradient(self, rng):
        ref = rng.uniform(0, 1, (24, 24, 3))
        gm = feat.GuidanceIndexMap(rng.integers(0, 3, (3, 3)),
                                   rng.integers(0, 3, (3, 3)), 3, 3)

        def fn(out):
            val, grad = feat.loss_color(out.color, ref, gm)
            return val, grad, np.zeros((24, 24))
        self._fd_check(rng, fn)

    def test_tcm_gradient_through_extractor(self, rng):
        # 24x24 image -> 3x3 feature grid; chain through the builtin
        # descriptor adjoint into the renderer
        ref_feat = feat.FeatureMap(rng.normal(size=(12, 3, 3)))
        gm = feat.GuidanceIndexMap(rng.integers(0, 3, (3, 3)),
                                   rng.integers(0, 3, (3, 3)), 3, 3)

        def fn(out):
            fs = feat.builtin_features(out.color)
            val, g_feat = feat.loss_tcm(fs, gm, ref_feat)
            grad = feat.builtin_features_backward(out.color, g_feat)
            return val, grad, np.zeros((24, 24))
        self._fd_check(rng, fn, tol=5e-3)


class TestOcclusionWeights:
    def test_full_mask_zero_weights(self):
        w = sty.occlusion_weights(np.ones((16, 16), bool), (2, 2))
        np.testing.assert_array_equal(w, 0.0)

    def test_empty_mask_full_weights(self):
        w = sty.occlusion_weights(np.zeros((16, 16), bool), (2, 2))
        np.testing.assert_array_equal(w, 1.0)

    def test_partial(self):
        mask = np.zeros((16, 16), bool)
        mask[:8, :8] = True
        w = sty.occlusion_weights(mask, (2, 2))
        np.testing.assert_allclose(w, [[0.0, 1.0], [1.0, 1.0]])
