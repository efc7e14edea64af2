"""Pseudo-view synthesis and the stylization objective.

A pseudo view warps the style reference into a new camera by lifting every
reference pixel with the content model's depth, reprojecting, and keeping
only points that pass a depth-based visibility check against the target
view's own content depth.  The losses here all return ``(value, grad)``
pairs so the training loop can push them through the renderer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import Camera
from .rasterizer import NEAR_PLANE
from .features import (FeatureMap, GuidanceIndexMap, extract_features,
                       loss_color, loss_tcm, match_nearest)

VISIBILITY_REL = 0.01

# Pixels whose blended weight falls below this coverage carry no usable
# surface depth and are excluded from warping.
MIN_DEPTH_COVERAGE = 0.5

# A warped pixel is masked out when its contributing source colors disagree
# by more than this standard deviation (sampling/depth ambiguity).
SOURCE_AGREEMENT_STD = 0.1

# A warped pixel needs at least this much accumulated splat weight: pixels at
# the rim of the warped footprint extrapolate from partial bilinear weights
# and are unreliable.
MIN_SPLAT_WEIGHT = 0.25


def warp_depth(render_output) -> np.ndarray:
    """Depth map suitable for lifting/visibility during warping.

    The raw blended depth underestimates the surface wherever coverage
    (1 - final transmittance) falls short of 1, so it is alpha-normalized
    here; pixels with very low coverage get depth 0 (not warpable).  The
    depth *loss* keeps using the raw blended depth.
    """
    coverage = 1.0 - render_output.final_transmittance
    ok = coverage >= MIN_DEPTH_COVERAGE
    return np.where(ok, render_output.depth / np.maximum(coverage, 1e-12), 0.0)


@dataclass
class PseudoView:
    """Warped style image with its validity mask and pose."""

    image: np.ndarray
    mask: np.ndarray
    pose: Camera


@dataclass
class LossWeights:
    rec: float = 1.0
    depth: float = 10.0
    view: float = 2.0
    tcm: float = 1.0
    color: float = 15.0

    def __post_init__(self):
        for name in ("rec", "depth", "view", "tcm", "color"):
            if getattr(self, name) < 0:
                raise ValueError(f"negative loss weight {name}")


def synthesize_pseudo_view(ref_img, ref_depth, ref_cam: Camera,
                           target_cam: Camera, target_depth,
                           eps_rel: float = VISIBILITY_REL,
                           eps_abs: float = 0.0) -> PseudoView:
    """Forward-splat the reference image into the target view.

    Reference pixels with positive depth are lifted to world points and
    reprojected.  A point supervises a target pixel only if it lands inside
    the image and passes the depth-based visibility check
    ``z <= target_depth * (1 + eps_rel) + eps_abs``.  Colors are splatted
    with bilinear sub-pixel weights, restricted per pixel to the sources in
    the nearest depth band (the same tolerance): this keeps occluded points
    out and makes the warp sub-pixel accurate, so warping a view onto itself
    reproduces it to numerical precision.
    """
    ref_img = np.asarray(ref_img, dtype=np.float64)
    ref_depth = np.asarray(ref_depth, dtype=np.float64)
    target_depth = np.asarray(target_depth, dtype=np.float64)
    if ref_img.shape[:2] != ref_depth.shape:
        raise ValueError("reference image and depth resolutions differ")
    if ref_depth.shape != (ref_cam.height, ref_cam.width):
        raise ValueError("reference depth does not match the reference camera")
    if target_depth.shape != (target_cam.height, target_cam.width):
        raise ValueError("target depth does not match the target camera")

    ht, wt = target_cam.height, target_cam.width
    out_img = np.zeros((ht, wt, 3))
    out_mask = np.zeros((ht, wt), dtype=bool)
    h, w = ref_depth.shape

    src = np.nonzero(ref_depth.ravel() > 0)[0]
    if len(src) == 0:
        return PseudoView(out_img, out_mask, target_cam)
    d = ref_depth.ravel()[src]
    jj = (src % w).astype(np.float64)
    ii = (src // w).astype(np.float64)
    cam_pts = np.stack([(jj - ref_cam.cx) / ref_cam.fx * d,
                        (ii - ref_cam.cy) / ref_cam.fy * d, d], axis=1)
    world = ref_cam.cam_to_world_points(cam_pts)
    pc = target_cam.world_to_cam_points(world)
    z = pc[:, 2]
    ok = z > NEAR_PLANE
    u = target_cam.fx * pc[:, 0] / np.where(ok, z, 1.0) + target_cam.cx
    v = target_cam.fy * pc[:, 1] / np.where(ok, z, 1.0) + target_cam.cy
    u, v, z, src = u[ok], v[ok], z[ok], src[ok]
    if len(src) == 0:
        return PseudoView(out_img, out_mask, target_cam)

    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    fx = u - x0
    fy = v - y0
    colors = ref_img.reshape(-1, 3)[src]

    # (source, neighbor) pairs with bilinear weights
    pix_list, z_list, w_list, c_list = [], [], [], []
    for dx, dy, wgt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                        (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        nx = x0 + dx
        ny = y0 + dy
        keep = (wgt > 1e-9) & (nx >= 0) & (nx < wt) & (ny >= 0) & (ny < ht)
        if not np.any(keep):
            continue
        pix = ny[keep] * wt + nx[keep]
        zk = z[keep]
        visible = zk <= target_depth.ravel()[pix] * (1.0 + eps_rel) + eps_abs
        pix_list.append(pix[visible])
        z_list.append(zk[visible])
        w_list.append(wgt[keep][visible])
        c_list.append(colors[keep][visible])
    if not pix_list:
        return PseudoView(out_img, out_mask, target_cam)
    pix = np.concatenate(pix_list)
    zs = np.concatenate(z_list)
    ws = np.concatenate(w_list)
    cs = np.concatenate(c_list)
    if len(pix) == 0:
        return PseudoView(out_img, out_mask, target_cam)

    # nearest depth band per landing pixel
    zbuf = np.full(ht * wt, np.inf)
    np.minimum.at(zbuf, pix, zs)
    in_band = zs <= zbuf[pix] * (1.0 + eps_rel) + eps_abs
    pix, ws, cs = pix[in_band], ws[in_band], cs[in_band]

    wsum = np.zeros(ht * wt)
    csum = np.zeros((ht * wt, 3))
    c2sum = np.zeros((ht * wt, 3))
    np.add.at(wsum, pix, ws)
    np.add.at(csum, pix, ws[:, None] * cs)
    np.add.at(c2sum, pix, ws[:, None] * cs ** 2)
    covered = wsum > MIN_SPLAT_WEIGHT
    mean = csum[covered] / wsum[covered, None]
    var = np.maximum(c2sum[covered] / wsum[covered, None] - mean ** 2, 0.0)
    # pixels whose contributing sources disagree carry unreliable colors
    confident = np.sqrt(var.mean(axis=1)) <= SOURCE_AGREEMENT_STD
    out_img.reshape(-1, 3)[covered] = mean
    out_mask.ravel()[np.nonzero(covered)[0][confident]] = True
    return PseudoView(out_img, out_mask, target_cam)


def loss_view(render, pv: PseudoView):
    """Masked mean absolute error against the pseudo view; zero on an empty
    mask.  Returns (value, grad w.r.t. render)."""
    render = np.asarray(render, dtype=np.float64)
    if render.shape != pv.image.shape:
        raise ValueError("render and pseudo view shapes differ")
    count = int(pv.mask.sum())
    grad = np.zeros_like(render)
    if count == 0:
        return 0.0, grad
    diff = render - pv.image
    masked = diff[pv.mask]
    value = float(np.abs(masked).mean())
    grad[pv.mask] = np.sign(masked) / masked.size
    return value, grad


def loss_depth(d_hat, d_ref):
    """Mean absolute depth difference.  Returns (value, grad w.r.t. d_hat)."""
    d_hat = np.asarray(d_hat, dtype=np.float64)
    d_ref = np.asarray(d_ref, dtype=np.float64)
    diff = d_hat - d_ref
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def loss_rec(render, style_ref):
    """Mean absolute error against the reference image.  Returns
    (value, grad w.r.t. render)."""
    render = np.asarray(render, dtype=np.float64)
    diff = render - np.asarray(style_ref, dtype=np.float64)
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def total_loss(parts: dict, w: LossWeights) -> float:
    """Weighted sum of the five objective terms."""
    return (w.rec * parts.get("rec", 0.0)
            + w.depth * parts.get("depth", 0.0)
            + w.view * parts.get("view", 0.0)
            + w.tcm * parts.get("tcm", 0.0)
            + w.color * parts.get("color", 0.0))


@dataclass
class ViewGuidance:
    """Per-view guidance bundle: the correspondence map from content features
    plus the style feature grid the TCM loss gathers from."""

    index_map: GuidanceIndexMap
    style_features: FeatureMap


def build_guidance(content_render, content_render_ref, style_ref,
                   extractor: str = "builtin",
                   content_feat: FeatureMap | None = None,
                   content_ref_feat: FeatureMap | None = None,
                   style_feat: FeatureMap | None = None) -> ViewGuidance:
    """Construct the guidance for one view from the *content* model's
    renders.  Feature maps may be passed in precomputed (the file-backed
    path); otherwise they come from ``extractor`` applied to the images."""
    if content_feat is None:
        content_feat = extract_features(content_render, extractor)
    if content_ref_feat is None:
        content_ref_feat = extract_features(content_render_ref, extractor)
    if style_feat is None:
        style_feat = extract_features(style_ref, extractor)
    index_map = match_nearest(content_feat, content_ref_feat)
    return ViewGuidance(index_map, style_feat)


def cell_fractions(values, grid_shape):
    """Per-cell mean of a pixel map on the feature grid."""
    h, w = values.shape
    hc, wc = grid_shape
    stride_h = -(-h // hc)
    stride_w = -(-w // wc)
    rows = np.minimum(np.arange(h) // stride_h, hc - 1)
    cols = np.minimum(np.arange(w) // stride_w, wc - 1)
    cell = rows[:, None] * wc + cols[None, :]
    counts = np.bincount(cell.ravel(), minlength=hc * wc).astype(np.float64)
    sums = np.bincount(cell.ravel(), weights=np.asarray(values, dtype=np.float64).ravel(),
                       minlength=hc * wc)
    return (sums / counts).reshape(hc, wc)


def occlusion_weights(mask, grid_shape):
    """Per-cell fraction of pixels NOT covered by the pseudo-view mask: the
    correspondence losses concentrate on these unsupervised locations."""
    return 1.0 - cell_fractions(np.asarray(mask, dtype=np.float64), grid_shape)


def surface_weights(render_output, grid_shape):
    """Per-cell weight that keeps the correspondence losses on actual scene
    surface: cells dominated by background (low blended coverage) are
    excluded, since their features match arbitrarily."""
    cov = cell_fractions(1.0 - render_output.final_transmittance, grid_shape)
    return np.clip((cov - 0.8) / 0.15, 0.0, 1.0)


def stylization_losses(render_img, render_depth, content_depth, pv: PseudoView,
                       style_ref, guidance: ViewGuidance,
                       stylized_feat: FeatureMap | None = None,
                       feat_backward=None, occlusion=None):
    """All non-reference losses for one sampled view.

    Returns ``(parts, grad_color, grad_depth)`` with the raw (unweighted)
    per-term gradients; the caller applies the balancing weights.
    ``stylized_feat``/``feat_backward`` supply the feature forward/adjoint for
    the TCM term; ``occlusion`` (feature-grid weights) focuses the
    correspondence terms on pixels the pseudo view cannot supervise.
    """
    parts = {}
    grads_color = {}
    parts["view"], grads_color["view"] = loss_view(render_img, pv)
    parts["depth"], grad_depth = loss_depth(render_depth, content_depth)
    parts["color"], grads_color["color"] = loss_color(
        render_img, style_ref, guidance.index_map, location_weights=occlusion)
    if stylized_feat is not None:
        tcm_val, g_feat = loss_tcm(stylized_feat, guidance.index_map,
                                   guidance.style_features,
                                   location_weights=occlusion)
        parts["tcm"] = tcm_val
        grads_color["tcm"] = feat_backward(g_feat)
    else:
        parts["tcm"] = 0.0
        grads_color["tcm"] = np.zeros_like(np.asarray(render_img, dtype=np.float64))
    return parts, grads_color, grad_depth
