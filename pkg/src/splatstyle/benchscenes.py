"""Reusable desk-scale benchmark setups shared by the bench CLI, the
evaluation protocols and the acceptance suite.

Two rigs are used: ``benchmark_rig`` (wide arc, strong elevation changes)
for the pretraining benchmark, and a closer arc here for the stylization
benchmarks, where the quad fills the frame the way full-scale capture does.
"""

from __future__ import annotations

import numpy as np

from . import datasets
from .control import ControlConfig
from .optim import LearningRates
from .scene import GaussianScene, look_at_camera
from .train import TrainConfig, pretrain


def pretrain_benchmark_config(seed=0, budget=500, total_iters=2000) -> TrainConfig:
    """The calibrated configuration for the checkerboard-quad pretraining
    benchmark (2000 iterations to a 500-splat budget)."""
    return TrainConfig(
        total_iters=total_iters, seed=seed, n_init=64,
        lrs=LearningRates(color_dc=1e-2, opacity_logit=2.5e-2),
        control=ControlConfig(max_gaussians=budget, pos_threshold=2e-4,
                              interval_iters=50, warmup_iters=200),
    )


def random_cloud(n, seed=0, box=0.9, sigma=0.01) -> GaussianScene:
    """n small random splats in front of the camera arc, for throughput
    measurements."""
    rng = np.random.default_rng(seed)
    rot = rng.normal(size=(n, 4))
    scene = GaussianScene(
        rng.uniform(-box, box, (n, 3)) * np.array([1.0, 1.0, 0.3]),
        rot,
        np.log(rng.uniform(0.5 * sigma, 2.0 * sigma, (n, 3))),
        rng.uniform(-1.0, 2.0, n),
        rng.uniform(-1.0, 1.0, (n, 3)),
    )
    scene.normalize_rotations()
    return scene


def flat_quad_scene(texture_fn, n_side=8, half=1.0, sigma_z=0.02,
                    opacity=0.95, backing=True) -> GaussianScene:
    """A grid of thin splats lying exactly in the z=0 quad, colored from the
    texture: the desk-scale stand-in for a well-reconstructed content model
    whose granularity is set by ``n_side``.

    ``backing`` adds a sparser, larger-splat layer just behind the quad (as a
    real captured scene would have), so transient coverage gaps during
    density control reveal scene color instead of background black.
    """
    from .scene import SH_C0, inverse_sigmoid
    spacing = 2.0 * half / n_side
    centers = (np.arange(n_side) + 0.5) * spacing - half
    gx, gy = np.meshgrid(centers, centers)
    n = n_side * n_side
    pos = np.stack([gx.ravel(), gy.ravel(), np.zeros(n)], axis=1)
    scales = np.tile([spacing * 0.6, spacing * 0.6, sigma_z], (n, 1))
    if backing:
        nb = max(n_side // 2, 2)
        bs = 2.0 * half / nb
        bc = (np.arange(nb) + 0.5) * bs - half
        bx, by = np.meshgrid(bc, bc)
        pos_b = np.stack([bx.ravel(), by.ravel(), np.full(nb * nb, 0.08)], axis=1)
        pos = np.concatenate([pos, pos_b])
        scales = np.concatenate([scales, np.tile([bs * 0.7, bs * 0.7, sigma_z],
                                                 (nb * nb, 1))])
    m = len(pos)
    rgb = texture_fn(pos[:, 0], pos[:, 1])
    rot = np.zeros((m, 4))
    rot[:, 0] = 1.0
    return GaussianScene(pos, rot, np.log(scales),
                         np.full(m, inverse_sigmoid(opacity)),
                         (np.clip(rgb, 0.02, 0.98) - 0.5) / SH_C0)


def stylize_rig(n_views, width=64, height=64, max_angle_deg=28.0):
    """Close-in arc for the stylization benchmarks: the quad fills the frame,
    so the depth regularizer constrains geometry rather than framing."""
    cams = []
    angles = np.linspace(-np.radians(max_angle_deg), np.radians(max_angle_deg),
                         n_views)
    for k, a in enumerate(angles):
        dist = 1.9 if k % 2 == 0 else 2.2
        elev = 0.25 * dist * (1 if k % 2 else -1) * (0.6 + 0.4 * abs(np.sin(3 * a)))
        eye = np.array([dist * np.sin(a), elev, -dist * np.cos(a)])
        cams.append(look_at_camera(eye, [0, 0, 0], width=width, height=height,
                                   cam_id=k))
    return cams


def identity_setup(seed=0, n_views=6, stylize_iters=300):
    """The identity fixed-point scenario: a coarse content quad, a wide
    reference camera whose frustum covers everything the training views see,
    and a 20-frame navigation path across the interior of the capture arc."""
    setup = coarse_quad_setup(seed=seed, n_views=n_views,
                              stylize_iters=stylize_iters)
    cams = setup["cameras"]
    mid = cams[len(cams) // 2]
    dist = float(np.linalg.norm(mid.position))
    wide_ref = look_at_camera(mid.position, [0, 0, 0], width=72, height=72,
                              focal=(72 - 1) / 2 * dist / 1.25, cam_id=99)
    setup["ref_cam"] = wide_ref
    setup["style"] = None  # identity scenario renders its own reference
    setup["path_cams"] = (cams[1], cams[-2])
    return setup


def coarse_quad_setup(seed=0, n_views=4, width=64, height=64,
                      coarse_splats=36, pretrain_iters=300,
                      stylize_iters=900, pattern_tiles=10,
                      pattern_radius=0.78):
    """A converged *coarse* content model of a smooth flat quad, plus a
    content-aligned reference whose high-frequency pattern is confined to a
    central disc.

    The content splat granularity exceeds the pattern frequency, which is
    exactly the regime density control must resolve; the pattern is localized
    so the *selection signal* matters under a split budget, and its cell
    colors average to the content base color so that extra capacity (not
    recoloring) is the only way to reduce the error.  The content carries
    broad low-frequency blobs so multi-view fitting pins the surface depth.

    The coarse content model starts as an on-plane splat grid (the stand-in
    for a properly reconstructed scene) and its appearance is polished with
    the photometric objective before stylization.
    """
    content_tex = datasets.smooth_texture()
    cams = stylize_rig(n_views, width, height)
    images = [datasets.render_quad_view(c, content_tex, supersample=4)[0]
              for c in cams]
    n_side = max(int(round(np.sqrt(coarse_splats))), 2)
    init = flat_quad_scene(content_tex, n_side=n_side)
    pre_cfg = TrainConfig(
        total_iters=pretrain_iters, seed=seed, n_init=len(init),
        control=ControlConfig(max_gaussians=len(init),
                              warmup_iters=pretrain_iters + 1),
    )
    content_scene = pretrain(images, cams, pre_cfg, initial_scene=init)

    ref_idx = n_views // 2
    ref_cam = cams[ref_idx]
    pattern = datasets.smooth_checkerboard_texture(
        tiles=pattern_tiles, softness=0.05, c0=(0.95, 0.2, 0.5), c1=(0.15, 0.9, 0.7))
    style, _ = datasets.render_quad_view(
        ref_cam,
        datasets.patterned_region_texture(pattern_tex=pattern, radius=pattern_radius),
        supersample=4)
    cfg = TrainConfig(total_iters=stylize_iters, seed=seed)
    return {
        "content_scene": content_scene,
        "content_images": images,
        "cameras": cams,
        "ref_cam": ref_cam,
        "style": style,
        "cfg": cfg,
    }
