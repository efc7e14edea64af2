"""Optimization loops: photometric pretraining and reference-based
stylization.

Pretraining fits a fresh splat set to posed images with an L1 objective and
baseline positional density control.  Stylization re-optimizes a pretrained
scene against a content-aligned style reference: every iteration supervises
the reference view (reconstruction) and one random training view (pseudo-view,
depth regularization, correspondence and color matching), with texture-guided
density control on a warmup/interval/stop schedule.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import control as ctl
from . import features as feat
from . import stylize as sty
from .optim import LearningRates, OptimizerState, adam_step
from .rasterizer import NEAR_PLANE, backward, render
from .scene import Camera, GaussianScene, inverse_sigmoid

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    total_iters: int = 3000
    lrs: LearningRates = field(default_factory=LearningRates)
    loss_weights: sty.LossWeights = field(default_factory=sty.LossWeights)
    control: ctl.ControlConfig = field(default_factory=ctl.ControlConfig)
    seed: int = 0
    view_sampling: str = "uniform"
    views_per_iter: int = 1  # pretraining: gradients averaged over this many sampled views
    n_init: int = 64
    extractor: str = "builtin"
    control_mode: str = "texture"  # texture | positional | none
    metrics_path: str | None = None
    control_log_path: str | None = None

    def __post_init__(self):
        if self.total_iters < 1:
            raise ValueError("total_iters must be >= 1")
        for g in ("position", "rotation", "log_scale", "opacity_logit", "color_dc"):
            if getattr(self.lrs, g) <= 0:
                raise ValueError(f"learning rate {g} must be positive")
        if self.view_sampling != "uniform":
            raise ValueError("only uniform view sampling is supported")
        if self.views_per_iter < 1:
            raise ValueError("views_per_iter must be >= 1")
        if self.control_mode not in ("texture", "positional", "none"):
            raise ValueError(f"unknown control mode {self.control_mode!r}")


class _Jsonl:
    def __init__(self, path):
        self.fh = open(path, "w") if path else None

    def write(self, record):
        if self.fh:
            self.fh.write(json.dumps(record) + "\n")

    def close(self):
        if self.fh:
            self.fh.close()


def frusta_intersection_bbox(cameras, samples_per_axis: int = 48):
    """Axis-aligned bounding box of points visible in every camera, probed
    along each camera's optical axis."""
    centers = np.stack([c.position for c in cameras])
    spread = np.linalg.norm(centers - centers.mean(axis=0), axis=1).max()
    reach = 4.0 * max(spread, 1.0)
    pts = []
    for cam in cameras:
        fwd = cam.rotation[2]
        ts = np.linspace(NEAR_PLANE * 2, reach, samples_per_axis)
        pts.append(cam.position[None, :] + ts[:, None] * fwd[None, :])
    pts = np.concatenate(pts)
    ok = np.ones(len(pts), dtype=bool)
    for cam in cameras:
        pc = cam.world_to_cam_points(pts)
        z = pc[:, 2]
        u = cam.fx * pc[:, 0] / np.where(z > 0, z, 1.0) + cam.cx
        v = cam.fy * pc[:, 1] / np.where(z > 0, z, 1.0) + cam.cy
        ok &= (z > NEAR_PLANE) & (u >= 0) & (u <= cam.width - 1) \
            & (v >= 0) & (v <= cam.height - 1)
    if not np.any(ok):
        raise ValueError("no overlapping camera frusta")
    good = pts[ok]
    return good.min(axis=0), good.max(axis=0)


def init_scene(cameras, n_init: int, rng) -> GaussianScene:
    """Random isotropic gray splats inside the frusta-intersection box."""
    lo, hi = frusta_intersection_bbox(cameras)
    extent = float(np.linalg.norm(hi - lo))
    positions = rng.uniform(lo, hi, (n_init, 3))
    sigma = max(extent, 1e-6) / 20.0
    rot = np.zeros((n_init, 4))
    rot[:, 0] = 1.0
    scene = GaussianScene(
        positions, rot, np.full((n_init, 3), np.log(sigma)),
        np.full(n_init, inverse_sigmoid(0.1)), np.zeros((n_init, 3)))
    return scene


def _control_window(iteration, cfg: TrainConfig):
    c = cfg.control
    stop = c.stop_fraction * cfg.total_iters
    return (iteration > c.warmup_iters and iteration <= stop
            and iteration % c.interval_iters == 0)


def _apply_control(scene, state, iteration, cfg: TrainConfig, events: _Jsonl):
    c = cfg.control
    if cfg.control_mode == "texture":
        thr = ctl.threshold_at(iteration, cfg.total_iters, c)
        selected = ctl.select_texture_guided(scene, thr)
    elif cfg.control_mode == "positional":
        thr = c.pos_threshold
        selected = ctl.select_positional_baseline(scene, thr)
    else:
        thr = float("nan")
        selected = np.zeros(0, dtype=np.int64)

    n_before = len(scene)
    scene, applied = ctl.structured_split(scene, selected, c.max_gaussians)
    if len(applied) < len(selected):
        log.info("iter %d: budget cap skipped %d of %d splits",
                 iteration, len(selected) - len(applied), len(selected))
    survivors = np.ones(n_before, dtype=bool)
    survivors[applied] = False
    state.remap(survivors, n_new=len(applied) * ctl.SPLIT_CHILDREN)

    keep = ctl.prune_mask(scene, c.prune_opacity)
    scene = ctl.prune(scene, c.prune_opacity)
    state.remap(keep)

    scene.reset_stats()
    scene.mark_mutated()
    events.write({"iter": iteration, "selected": int(len(applied)),
                  "new_count": len(scene), "threshold": thr})
    return scene, state


def pretrain(images, cameras, cfg: TrainConfig,
             initial_scene: GaussianScene | None = None) -> GaussianScene:
    """Fit a fresh scene to posed images (mean L1) with baseline positional
    densification and opacity pruning.

    ``initial_scene`` replaces the default random-in-frusta initialization,
    e.g. to polish a constructed model.
    """
    images = [np.asarray(im, dtype=np.float64) for im in images]
    if len(images) < 2:
        raise ValueError("pretraining needs at least 2 posed images")
    if len(images) != len(cameras):
        raise ValueError("image/camera count mismatch")
    for im, cam in zip(images, cameras):
        if im.shape != (cam.height, cam.width, 3):
            raise ValueError("image size does not match its camera")

    rng = np.random.default_rng(cfg.seed)
    if initial_scene is None:
        scene = init_scene(cameras, cfg.n_init, rng)
    else:
        scene = initial_scene.copy()
        scene.reset_stats()
    lo, hi = frusta_intersection_bbox(cameras)
    extent = float(np.linalg.norm(hi - lo))
    lrs = cfg.lrs.scaled(extent)
    state = OptimizerState.for_scene(scene)
    metrics = _Jsonl(cfg.metrics_path)
    events = _Jsonl(cfg.control_log_path)
    pretrain_cfg = replace(cfg, control_mode="positional")

    try:
        for it in range(1, cfg.total_iters + 1):
            grads = None
            loss = 0.0
            for _ in range(cfg.views_per_iter):
                vi = int(rng.integers(0, len(cameras)))
                out = render(scene, cameras[vi], degree=0)
                diff = out.color - images[vi]
                loss += float(np.abs(diff).mean()) / cfg.views_per_iter
                dl_dcolor = np.sign(diff) / (diff.size * cfg.views_per_iter)
                g = backward(scene, cameras[vi], dl_dcolor,
                             np.zeros_like(out.depth), out)
                if it > cfg.control.warmup_iters:
                    ctl.accumulate(scene, g)
                grads = g if grads is None else grads.__iadd__(g)
            adam_step(scene, grads, state, lrs)
            metrics.write({"iter": it, "loss_total": loss, "loss_rec": loss,
                           "loss_depth": 0.0, "loss_view": 0.0, "loss_tcm": 0.0,
                           "loss_color": 0.0, "n_gaussians": len(scene)})
            if _control_window(it, cfg):
                scene, state = _apply_control(scene, state, it, pretrain_cfg, events)
    finally:
        metrics.close()
        events.close()
    return scene


class FeatureProvider:
    """Resolves the content/style feature maps for guidance construction.

    ``builtin`` computes them from the diffuse content renders; ``file:<dir>``
    reads FMAP files through a ``manifest.json`` mapping image names (camera
    ids and ``reference``) to files.  In-loop TCM always extracts the
    stylized render with the builtin descriptor, so file-backed grids must
    match the builtin stride-8 grid of the image.
    """

    def __init__(self, extractor: str):
        self.extractor = extractor
        self.manifest = None
        self.root = None
        if extractor.startswith("file:"):
            self.root = Path(extractor[len("file:"):])
            manifest_path = self.root / "manifest.json"
            if not manifest_path.exists():
                raise FileNotFoundError(f"feature manifest not found: {manifest_path}")
            self.manifest = json.loads(manifest_path.read_text())
        elif extractor != "builtin":
            raise ValueError(f"unknown extractor {extractor!r}")

    def features(self, image, key: str) -> feat.FeatureMap:
        if self.manifest is None:
            return feat.builtin_features(image)
        entry = self.manifest.get(str(key))
        if entry is None:
            raise KeyError(f"feature manifest has no entry for {key!r}")
        if isinstance(entry, dict):
            # prefer the stride-8 layer, which matches the builtin grid
            entry = entry.get("relu4_3") or next(iter(entry.values()))
        fm = feat.extract_features(image, f"file:{self.root / entry}")
        want = feat.feature_grid_shape(image.shape[0], image.shape[1])
        if (fm.height, fm.width) != want:
            raise ValueError(
                f"feature grid {fm.height}x{fm.width} for {key!r} does not match "
                f"the stride-8 grid {want[0]}x{want[1]} needed for in-loop matching")
        return fm


@dataclass
class StylizeContext:
    """Everything precomputed from the frozen content model."""

    content_depths: list
    content_renders: list
    ref_depth: np.ndarray
    ref_render: np.ndarray
    pseudo_views: list
    guidance: list
    occlusion: list
    extent: float


def prepare_stylization(content_scene, style_ref, ref_cam, cameras,
                        extractor: str = "builtin") -> StylizeContext:
    provider = FeatureProvider(extractor)
    ref_out = render(content_scene, ref_cam, degree=0)
    extent = max(content_scene.extent(), 1e-9)
    eps_abs = 1e-3 * extent
    content_depths, content_renders, pvs, guidance, occlusion = [], [], [], [], []
    f_ref_content = provider.features(ref_out.color, "reference_view")
    f_style = provider.features(np.asarray(style_ref, dtype=np.float64), "reference")
    ref_warp_depth = sty.warp_depth(ref_out)
    for cam in cameras:
        out = render(content_scene, cam, degree=0)
        content_depths.append(out.depth)
        content_renders.append(out.color)
        pv = sty.synthesize_pseudo_view(style_ref, ref_warp_depth, ref_cam,
                                        cam, sty.warp_depth(out), eps_abs=eps_abs)
        pvs.append(pv)
        f_i = provider.features(out.color, cam.id)
        index_map = feat.match_nearest(f_i, f_ref_content)
        guidance.append(sty.ViewGuidance(index_map, f_style))
        occlusion.append(sty.surface_weights(out, index_map.shape))
    return StylizeContext(content_depths, content_renders, ref_out.depth,
                          ref_out.color, pvs, guidance, occlusion, extent)


def stylize(content_scene: GaussianScene, style_ref, ref_cam: Camera,
            cameras, cfg: TrainConfig,
            context: StylizeContext | None = None) -> GaussianScene:
    """Re-optimize a pretrained scene to match a content-aligned reference.

    Geometry stays trainable but is held near the content model by the depth
    term; appearance optimization is diffuse-only.
    """
    style_ref = np.asarray(style_ref, dtype=np.float64)
    if style_ref.shape != (ref_cam.height, ref_cam.width, 3):
        raise ValueError("style reference resolution does not match its camera")
    if context is None:
        context = prepare_stylization(content_scene, style_ref, ref_cam,
                                      cameras, cfg.extractor)

    rng = np.random.default_rng(cfg.seed)
    scene = content_scene.copy()
    scene.colors_rest = None  # diffuse-only appearance editing
    scene.reset_stats()
    scene.mark_mutated()
    lrs = cfg.lrs.scaled(context.extent)
    state = OptimizerState.for_scene(scene)
    metrics = _Jsonl(cfg.metrics_path)
    events = _Jsonl(cfg.control_log_path)
    w = cfg.loss_weights

    try:
        for it in range(1, cfg.total_iters + 1):
            # reference view: reconstruction only
            ref_out = render(scene, ref_cam, degree=0)
            rec, g_rec = sty.loss_rec(ref_out.color, style_ref)
            grads = backward(scene, ref_cam, w.rec * g_rec,
                             np.zeros_like(ref_out.depth), ref_out)
            if it > cfg.control.warmup_iters:
                ctl.accumulate(scene, grads)

            # one random training view: view, depth, tcm and color terms
            vi = int(rng.integers(0, len(cameras)))
            cam = cameras[vi]
            out = render(scene, cam, degree=0)
            f_stylized = feat.builtin_features(out.color)
            parts, g_color_terms, g_depth = sty.stylization_losses(
                out.color, out.depth, context.content_depths[vi],
                context.pseudo_views[vi], style_ref, context.guidance[vi],
                stylized_feat=f_stylized,
                feat_backward=lambda gf: feat.builtin_features_backward(out.color, gf),
                occlusion=context.occlusion[vi])
            parts["rec"] = rec
            dl_dcolor = (w.view * g_color_terms["view"]
                         + w.color * g_color_terms["color"]
                         + w.tcm * g_color_terms["tcm"])
            dl_ddepth = w.depth * g_depth
            g2 = backward(scene, cam, dl_dcolor, dl_ddepth, out)
            if it > cfg.control.warmup_iters:
                ctl.accumulate(scene, g2)
            grads += g2

            total = sty.total_loss(parts, w)
            if not np.isfinite(total):
                dump = {"iter": it, "parts": parts}
                path = Path(cfg.metrics_path or "stylize_nan_dump.json")
                Path(str(path) + ".nan.json").write_text(json.dumps(dump))
                raise RuntimeError(f"non-finite loss at iteration {it}: {parts}")

            adam_step(scene, grads, state, lrs)
            metrics.write({"iter": it, "loss_total": total,
                           "loss_rec": parts["rec"], "loss_depth": parts["depth"],
                           "loss_view": parts["view"], "loss_tcm": parts["tcm"],
                           "loss_color": parts["color"], "n_gaussians": len(scene)})
            if _control_window(it, cfg):
                scene, state = _apply_control(scene, state, it, cfg, events)
    finally:
        metrics.close()
        events.close()
    return scene
