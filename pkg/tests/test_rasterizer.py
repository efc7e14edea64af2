import numba
import numpy as np
import pytest

from splatstyle.rasterizer import (ALPHA_MAX, ALPHA_SKIP, COV2D_DILATION,
                                   T_MIN, GradBuffers, backward, project,
                                   render, render_brute_force)
from splatstyle.scene import (Camera, Gaussian3D, GaussianScene, SH_C0,
                              inverse_sigmoid, look_at_camera)
from conftest import random_scene


def axis_camera(width=100, height=100, f=100.0):
    return Camera(width, height, f, f, 50.0, 50.0, np.eye(4))


def dc_for(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def splat_at(position, sigma=0.3, opacity=0.999, rgb=(1.0, 1.0, 1.0)):
    return Gaussian3D(position, [1, 0, 0, 0], np.log([sigma] * 3),
                      float(inverse_sigmoid(opacity)), dc_for(rgb))


class TestProject:
    def test_on_axis_projection(self):
        cam = axis_camera()
        s = project(splat_at([0.0, 0, 1.0]), cam)
        np.testing.assert_allclose(s.mean2d, [50.0, 50.0], atol=1e-12)
        assert s.depth == pytest.approx(1.0)

    def test_isotropic_analytic_covariance(self):
        cam = axis_camera()
        sigma, z0 = 0.02, 2.0
        s = project(splat_at([0.0, 0, z0], sigma=sigma), cam)
        expected = (cam.fx * sigma / z0) ** 2 * np.eye(2) + COV2D_DILATION * np.eye(2)
        np.testing.assert_allclose(s.cov2d, expected, rtol=1e-6)

    def test_behind_camera_culled(self):
        assert project(splat_at([0.0, 0, -1.0]), axis_camera()) is None

    def test_off_image_culled(self):
        # 3-sigma footprint misses the image entirely
        assert project(splat_at([50.0, 0, 1.0], sigma=0.001), axis_camera()) is None


class TestRenderExamples:
    def test_empty_scene(self, small_camera):
        out = render(GaussianScene.empty(), small_camera)
        np.testing.assert_array_equal(out.color, 0.0)
        np.testing.assert_array_equal(out.depth, 0.0)
        np.testing.assert_array_equal(out.final_transmittance, 1.0)

    def test_zero_sized_image(self):
        with pytest.raises(ValueError):
            render(GaussianScene.empty(),
                   Camera(0, 16, 10, 10, 0, 8, np.eye(4)))

    def test_single_opaque_splat(self):
        cam = axis_camera()
        scene = GaussianScene.from_gaussians(
            [splat_at([0.0, 0, 1.0], sigma=0.3, opacity=0.9999,
                      rgb=(0.8, 0.6, 0.4))])
        out = render(scene, cam)
        np.testing.assert_allclose(out.color[50, 50], ALPHA_MAX * np.array([0.8, 0.6, 0.4]),
                                   rtol=1e-12)
        assert out.depth[50, 50] == pytest.approx(ALPHA_MAX * 1.0)
        assert out.final_transmittance[50, 50] == pytest.approx(1 - ALPHA_MAX)

    def test_two_splat_expansion(self):
        cam = axis_camera()
        c1, c2 = (0.9, 0.1, 0.3), (0.2, 0.8, 0.5)
        scene = GaussianScene.from_gaussians([
            splat_at([0.0, 0, 1.0], sigma=0.5, opacity=0.5, rgb=c1),
            splat_at([0.0, 0, 2.0], sigma=1.0, opacity=0.5, rgb=c2),
        ])
        out = render(scene, cam)
        expected = 0.5 * np.array(c1) + 0.25 * np.array(c2)
        np.testing.assert_allclose(out.color[50, 50], expected, rtol=1e-12)
        assert out.depth[50, 50] == pytest.approx(0.5 * 1.0 + 0.25 * 2.0)

    def test_contributors_listing(self):
        cam = axis_camera()
        scene = GaussianScene.from_gaussians([
            splat_at([0.0, 0, 2.0], sigma=1.0),
            splat_at([0.0, 0, 1.0], sigma=0.5),
        ])
        out = render(scene, cam)
        ids = out.contributors(50, 50)
        assert list(ids) == [1, 0]  # front-to-back order


class TestRenderOracle:
    def test_matches_brute_force_random_scenes(self, rng):
        cam = look_at_camera([0, 0, -2.0], [0, 0, 0], width=8, height=8, focal=10)
        for _ in range(5):
            scene = random_scene(rng, 5)
            tiled = render(scene, cam)
            brute = render_brute_force(scene, cam)
            np.testing.assert_allclose(tiled.color, brute.color, atol=1e-6)
            np.testing.assert_allclose(tiled.depth, brute.depth, atol=1e-6)

    def test_matches_brute_force_larger(self, rng):
        cam = look_at_camera([0.3, 0.4, -2.0], [0, 0, 0], width=32, height=32,
                             focal=35)
        for _ in range(3):
            scene = random_scene(rng, 50, opacity_range=(-2, 3))
            tiled = render(scene, cam)
            brute = render_brute_force(scene, cam)
            np.testing.assert_allclose(tiled.color, brute.color, atol=1e-6)
            np.testing.assert_allclose(tiled.depth, brute.depth, atol=1e-6)
            np.testing.assert_allclose(tiled.final_transmittance,
                                       brute.final_transmittance, atol=1e-6)


class TestRenderInvariants:
    def test_weight_partition(self, rng):
        # all-white splats make the red channel equal the blended weight sum
        scene = random_scene(rng, 25)
        scene.colors_dc[:] = dc_for([1.0, 1.0, 1.0])
        scene.mark_mutated()
        cam = look_at_camera([0, 0.2, -2.0], [0, 0, 0], width=24, height=24, focal=26)
        out = render(scene, cam)
        np.testing.assert_allclose(out.color[:, :, 0] + out.final_transmittance,
                                   1.0, atol=1e-6)

    def test_monotone_transmittance_and_early_stop(self, rng):
        scene = random_scene(rng, 40, opacity_range=(2.0, 4.0))
        cam = look_at_camera([0, 0, -1.5], [0, 0, 0], width=16, height=16, focal=30)
        out = render(scene, cam)
        assert out.final_transmittance.min() >= 0.0
        # heavily occluded pixels stop above the floor scaled by max opacity
        assert out.final_transmittance.min() >= T_MIN * (1 - ALPHA_MAX) - 1e-15

    def test_color_range(self, rng):
        scene = random_scene(rng, 30)
        scene.colors_dc[:] = dc_for(np.clip(rng.uniform(0, 1, (30, 3)), 0, 1))
        scene.mark_mutated()
        cam = look_at_camera([0, 0, -2.0], [0, 0, 0], width=16, height=16, focal=20)
        out = render(scene, cam)
        assert out.color.min() >= 0.0 and out.color.max() <= 1.0

    def test_bit_identical_across_runs_and_threads(self, rng):
        scene = random_scene(rng, 60)
        cam = look_at_camera([0, 0, -2.0], [0, 0, 0], width=48, height=48, focal=55)
        target = rng.uniform(0, 1, (48, 48, 3))
        results = []
        for threads in (1, 2, 1):
            numba.set_num_threads(threads)
            out = render(scene, cam)
            dl = np.sign(out.color - target) / out.color.size
            g = backward(scene, cam, dl, np.zeros((48, 48)), out)
            results.append((out.color.copy(), g.d_position.copy(),
                            g.d_rotation.copy(), g.pos_grad_norm.copy()))
        for r in results[1:]:
            for a, b in zip(results[0], r):
                np.testing.assert_array_equal(a, b)


class TestBackward:
    def test_single_splat_color_gradient(self):
        cam = axis_camera(20, 20, f=20.0)
        scene = GaussianScene.from_gaussians(
            [splat_at([0.0, 0, 1.0], sigma=0.2, opacity=0.7, rgb=(0.6, 0.6, 0.6))])
        out = render(scene, cam)
        dl = np.ones((20, 20, 3))
        g = backward(scene, cam, dl, np.zeros((20, 20)), out)
        total_weight = np.sum(1.0 - out.final_transmittance)
        np.testing.assert_allclose(g.d_color_dc[0], SH_C0 * total_weight,
                                   rtol=1e-9)

    def test_non_contributing_gaussian_zero_grads(self, rng, small_camera):
        scene = random_scene(rng, 3)
        scene.positions[2] = [0, 0, -5.0]  # behind the camera
        scene.mark_mutated()
        out = render(scene, small_camera)
        g = backward(scene, small_camera, np.ones((16, 16, 3)),
                     np.ones((16, 16)), out)
        assert np.all(g.d_position[2] == 0)
        assert np.all(g.d_color_dc[2] == 0)
        assert g.d_opacity_logit[2] == 0

    def test_stale_scene_rejected(self, rng, small_camera):
        scene = random_scene(rng, 3)
        out = render(scene, small_camera)
        scene.positions[0, 0] += 0.1
        scene.mark_mutated()
        with pytest.raises(RuntimeError):
            backward(scene, small_camera, np.zeros((16, 16, 3)),
                     np.zeros((16, 16)), out)

    def test_camera_mismatch_rejected(self, rng, small_camera):
        scene = random_scene(rng, 3)
        out = render(scene, small_camera)
        other = look_at_camera([0, 0.5, -2.0], [0, 0, 0], width=16, height=16,
                               focal=20)
        with pytest.raises(RuntimeError):
            backward(scene, other, np.zeros((16, 16, 3)), np.zeros((16, 16)), out)

    @pytest.mark.parametrize("degree", [0, 1])
    def test_finite_difference_all_parameters(self, rng, small_camera, degree):
        # moderate opacities keep per-pixel transmittance away from the early
        # termination threshold, whose crossing is a (contracted) subgradient
        # discontinuity that central differences cannot measure
        scene = random_scene(rng, 8, with_rest=degree == 1,
                             opacity_range=(-1.5, 1.0))
        # keep per-pixel differences bounded away from the L1 kink so central
        # differences measure the render Jacobian, not the kink itself
        base = render(scene, small_camera, degree=degree)
        offset_c = rng.choice([-1, 1], base.color.shape) * rng.uniform(0.15, 0.45, base.color.shape)
        offset_d = rng.choice([-1, 1], base.depth.shape) * rng.uniform(0.15, 0.45, base.depth.shape)
        target = base.color - offset_c
        depth_target = base.depth - offset_d

        def loss_of(s):
            o = render(s, small_camera, degree=degree)
            return float(np.abs(o.color - target).mean()
                         + 0.1 * np.abs(o.depth - depth_target).mean())

        out = render(scene, small_camera, degree=degree)
        dl_c = np.sign(out.color - target) / out.color.size
        dl_d = 0.1 * np.sign(out.depth - depth_target) / out.depth.size
        g = backward(scene, small_camera, dl_c, dl_d, out)

        arrays = [("position", scene.positions, g.d_position),
                  ("rotation", scene.rotations, g.d_rotation),
                  ("log_scale", scene.log_scales, g.d_log_scale),
                  ("opacity", scene.opacity_logits, g.d_opacity_logit),
                  ("color_dc", scene.colors_dc, g.d_color_dc)]
        if degree == 1:
            arrays.append(("color_rest", scene.colors_rest, g.d_color_rest))
        h = 1e-4
        for name, arr, analytic in arrays:
            flat = arr.reshape(len(scene), -1)
            ga = analytic.reshape(len(scene), -1)
            for i in range(len(scene)):
                for j in range(flat.shape[1]):
                    orig = flat[i, j]
                    flat[i, j] = orig + h
                    scene.mark_mutated()
                    lp = loss_of(scene)
                    flat[i, j] = orig - h
                    scene.mark_mutated()
                    lm = loss_of(scene)
                    flat[i, j] = orig
                    scene.mark_mutated()
                    fd = (lp - lm) / (2 * h)
                    assert abs(ga[i, j] - fd) <= 1e-3 * max(abs(ga[i, j]), abs(fd), 1e-7), \
                        f"{name}[{i},{j}]: analytic {ga[i, j]} vs fd {fd}"

    def test_grad_norms_populated(self, rng, small_camera):
        scene = random_scene(rng, 5)
        target = rng.uniform(0, 1, (16, 16, 3))
        out = render(scene, small_camera)
        dl = np.sign(out.color - target) / out.color.size
        g = backward(scene, small_camera, dl, np.zeros((16, 16)), out)
        np.testing.assert_allclose(g.color_grad_norm,
                                   np.linalg.norm(g.d_color_dc, axis=1))
        assert g.pos_grad_norm.shape == (5,)

    def test_gradbuffers_accumulate(self, rng, small_camera):
        scene = random_scene(rng, 4)
        out = render(scene, small_camera)
        dl = np.ones((16, 16, 3)) / 768
        g1 = backward(scene, small_camera, dl, np.zeros((16, 16)), out)
        g2 = backward(scene, small_camera, dl, np.zeros((16, 16)), out)
        d1 = g1.d_position.copy()
        g1 += g2
        np.testing.assert_allclose(g1.d_position, 2 * d1)
