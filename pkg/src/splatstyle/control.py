"""Adaptive density control.

Two selection signals share one split operator: texture-guided selection
thresholds the accumulated per-splat color-gradient magnitude (the mean over
contributing iterations), while the baseline selection thresholds the
projected-position gradient magnitude the same way.  Selected splats are
replaced by nine children: one at the parent center and eight at the octant
corners of the parent ellipsoid at half a standard deviation per axis, with
per-axis scales divided by 8.  Low-opacity splats are pruned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import GaussianScene, quats_to_rotations, sigmoid
from .rasterizer import GradBuffers

SPLIT_CHILDREN = 9
SCALE_SHRINK = 8.0

# Child offsets in the unit-variance splat frame: center plus the 8 octants.
_OCTANTS = np.array([[0.0, 0.0, 0.0]] + [
    [sx, sy, sz]
    for sx in (-0.5, 0.5) for sy in (-0.5, 0.5) for sz in (-0.5, 0.5)
])


@dataclass
class ControlConfig:
    warmup_iters: int = 100
    interval_iters: int = 100
    stop_fraction: float = 0.5
    threshold_start: float = 1e-5
    threshold_end: float = 5e-6
    pos_threshold: float = 2e-4
    prune_opacity: float = 0.005
    max_gaussians: int | None = None

    def __post_init__(self):
        if not (self.threshold_start >= self.threshold_end > 0):
            raise ValueError("need threshold_start >= threshold_end > 0")
        if not (0 < self.stop_fraction <= 1):
            raise ValueError("stop_fraction must be in (0, 1]")
        if self.interval_iters < 1:
            raise ValueError("interval_iters must be >= 1")


def accumulate(scene: GaussianScene, grads: GradBuffers):
    """Fold one backward pass into the per-splat control statistics."""
    n = len(scene)
    if grads.color_grad_norm.shape != (n,) or grads.pos_grad_norm.shape != (n,):
        raise RuntimeError("gradient buffers do not match the scene size")
    scene.color_grad_accum += grads.color_grad_norm
    scene.pos_grad_accum += grads.pos_grad_norm
    contributed = (grads.color_grad_norm > 0) | (grads.pos_grad_norm > 0)
    scene.contrib_count += contributed


def threshold_at(iteration: int, total_iters: int, cfg: ControlConfig) -> float:
    """Selection threshold: linear from threshold_start at warmup end to
    threshold_end at the control stop point, constant outside the window."""
    stop = cfg.stop_fraction * total_iters
    if iteration <= cfg.warmup_iters:
        return cfg.threshold_start
    if iteration >= stop:
        return cfg.threshold_end
    frac = (iteration - cfg.warmup_iters) / (stop - cfg.warmup_iters)
    return cfg.threshold_start + frac * (cfg.threshold_end - cfg.threshold_start)


def _select(accum, counts, threshold):
    # Descending statistic order so a split budget goes to the worst first;
    # ties resolve to the lower index.
    mean = accum / np.maximum(counts, 1)
    idx = np.nonzero(mean > threshold)[0]
    order = np.lexsort((idx, -mean[idx]))
    return idx[order]


def select_texture_guided(scene: GaussianScene, threshold: float) -> np.ndarray:
    """Splats whose mean accumulated color-gradient norm exceeds the
    threshold."""
    return _select(scene.color_grad_accum, scene.contrib_count, threshold)


def select_positional_baseline(scene: GaussianScene, pos_threshold: float) -> np.ndarray:
    """Baseline signal: mean accumulated projected-position gradient norm."""
    return _select(scene.pos_grad_accum, scene.contrib_count, pos_threshold)


def structured_split(scene: GaussianScene, indices,
                     max_gaussians: int | None = None):
    """Replace each selected parent by 9 children (count change +8 each).

    Children copy the parent's rotation, opacity and color; their per-axis
    scales are the parent's divided by 8.  Survivors keep their exact values;
    statistics are resized and zeroed.  When ``max_gaussians`` would be
    exceeded, splits are applied in the order given and the tail is skipped
    (selectors pass indices most-urgent first).

    Returns ``(new_scene, applied_indices)``.
    """
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    n = len(scene)
    if len(indices):
        if indices.min() < 0 or indices.max() >= n:
            raise ValueError("split index out of range")
        if len(np.unique(indices)) != len(indices):
            raise ValueError("duplicate split indices")
    if max_gaussians is not None:
        budget = max(0, max_gaussians - n)
        allowed = budget // (SPLIT_CHILDREN - 1)
        applied = indices[:allowed]
    else:
        applied = indices
    if len(applied) == 0:
        out = scene.copy()
        return out, applied

    keep = np.ones(n, dtype=bool)
    keep[applied] = False

    R = quats_to_rotations(scene.rotations[applied])
    s = np.exp(scene.log_scales[applied])
    # (parent, child, 3): offsets rotated into world space
    offsets = np.einsum("pij,cj->pci", R * s[:, None, :], _OCTANTS)
    child_pos = scene.positions[applied][:, None, :] + offsets
    m = len(applied)
    child_pos = child_pos.reshape(m * SPLIT_CHILDREN, 3)
    rep = np.repeat(np.arange(m), SPLIT_CHILDREN)
    child_rot = scene.rotations[applied][rep]
    child_ls = scene.log_scales[applied][rep] - np.log(SCALE_SHRINK)
    child_op = scene.opacity_logits[applied][rep]
    child_dc = scene.colors_dc[applied][rep]
    child_rest = None if scene.colors_rest is None else scene.colors_rest[applied][rep]

    new = GaussianScene(
        np.concatenate([scene.positions[keep], child_pos]),
        np.concatenate([scene.rotations[keep], child_rot]),
        np.concatenate([scene.log_scales[keep], child_ls]),
        np.concatenate([scene.opacity_logits[keep], child_op]),
        np.concatenate([scene.colors_dc[keep], child_dc]),
        None if scene.colors_rest is None
        else np.concatenate([scene.colors_rest[keep], child_rest]),
    )
    return new, applied


def prune(scene: GaussianScene, prune_opacity: float) -> GaussianScene:
    """Drop splats whose opacity falls below the floor; statistics are
    compacted along with the parameters."""
    keep = sigmoid(scene.opacity_logits) >= prune_opacity
    out = GaussianScene(
        scene.positions[keep], scene.rotations[keep], scene.log_scales[keep],
        scene.opacity_logits[keep], scene.colors_dc[keep],
        None if scene.colors_rest is None else scene.colors_rest[keep],
    )
    out.color_grad_accum = scene.color_grad_accum[keep].copy()
    out.pos_grad_accum = scene.pos_grad_accum[keep].copy()
    out.contrib_count = scene.contrib_count[keep].copy()
    return out


def prune_mask(scene: GaussianScene, prune_opacity: float) -> np.ndarray:
    """Boolean survivor mask matching what :func:`prune` keeps."""
    return sigmoid(scene.opacity_logits) >= prune_opacity
