"""Feature extraction and nearest-neighbor correspondence.

The builtin extractor is a dependency-free 12-channel descriptor on a
stride-8 grid: per cell the mean of a luminance/chroma conversion (3), an
8-bin soft gradient-orientation histogram of the luminance (8), and the
luminance variance (1), L2-normalized per location.  It is differentiable in
the image, and ``builtin_features_backward`` provides the exact adjoint so
feature-space losses can flow into the renderer.

External feature grids (e.g. CNN activations) enter through FMAP files and
are matched with the same machinery.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sceneio

STRIDE = 8
N_BINS = 8
NORM_EPS = 1e-8
GRAD_EPS = 1e-12

# Rows: luminance, blue-difference chroma, red-difference chroma.
_YCC = np.array([
    [0.299, 0.587, 0.114],
    [-0.299, -0.587, 0.886],
    [0.701, -0.587, -0.114],
])


@dataclass
class FeatureMap:
    """Channel-major (C, H, W) feature grid with its provenance tag."""

    data: np.ndarray
    source: str = "builtin"

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]


@dataclass
class GuidanceIndexMap:
    """For every content feature location, the matched reference location."""

    target_rows: np.ndarray
    target_cols: np.ndarray
    ref_height: int
    ref_width: int

    @property
    def shape(self):
        return self.target_rows.shape


def feature_grid_shape(height, width, stride=STRIDE):
    return (-(-height // stride), -(-width // stride))


def extract_features(image, extractor: str = "builtin") -> FeatureMap:
    """Extract a feature grid: ``builtin`` or ``file:<path>`` (FMAP)."""
    if extractor == "builtin":
        return builtin_features(np.asarray(image, dtype=np.float64))
    if extractor.startswith("file:"):
        path = extractor[len("file:"):]
        data = sceneio.read_fmap(path).astype(np.float64)
        return FeatureMap(data, source=extractor)
    raise ValueError(f"unknown extractor {extractor!r}")


def _image_gradients(y):
    """Central differences inside, one-sided at borders (np.gradient rule)."""
    h, w = y.shape
    gx = np.zeros_like(y)
    gy = np.zeros_like(y)
    if w >= 2:
        gx[:, 1:-1] = 0.5 * (y[:, 2:] - y[:, :-2])
        gx[:, 0] = y[:, 1] - y[:, 0]
        gx[:, -1] = y[:, -1] - y[:, -2]
    if h >= 2:
        gy[1:-1, :] = 0.5 * (y[2:, :] - y[:-2, :])
        gy[0, :] = y[1, :] - y[0, :]
        gy[-1, :] = y[-1, :] - y[-2, :]
    return gx, gy


def _image_gradients_adjoint(g_gx, g_gy):
    h, w = g_gx.shape
    g_y = np.zeros_like(g_gx)
    if w >= 2:
        g_y[:, 2:] += 0.5 * g_gx[:, 1:-1]
        g_y[:, :-2] -= 0.5 * g_gx[:, 1:-1]
        g_y[:, 1] += g_gx[:, 0]
        g_y[:, 0] -= g_gx[:, 0]
        g_y[:, -1] += g_gx[:, -1]
        g_y[:, -2] -= g_gx[:, -1]
    if h >= 2:
        g_y[2:, :] += 0.5 * g_gy[1:-1, :]
        g_y[:-2, :] -= 0.5 * g_gy[1:-1, :]
        g_y[1, :] += g_gy[0, :]
        g_y[0, :] -= g_gy[0, :]
        g_y[-1, :] += g_gy[-1, :]
        g_y[-2, :] -= g_gy[-1, :]
    return g_y


def _cell_layout(h, w):
    hc, wc = feature_grid_shape(h, w)
    rows = np.minimum(np.arange(h) // STRIDE, hc - 1)
    cols = np.minimum(np.arange(w) // STRIDE, wc - 1)
    cell = rows[:, None] * wc + cols[None, :]
    counts = np.bincount(cell.ravel(), minlength=hc * wc).astype(np.float64)
    return hc, wc, cell, counts


def _builtin_parts(image):
    h, w = image.shape[:2]
    ycc = image @ _YCC.T
    y = ycc[:, :, 0]
    hc, wc, cell, counts = _cell_layout(h, w)
    flat = cell.ravel()

    mean_ycc = np.zeros((hc * wc, 3))
    np.add.at(mean_ycc, flat, ycc.reshape(-1, 3))
    mean_ycc /= counts[:, None]

    sum_y = np.bincount(flat, weights=y.ravel(), minlength=hc * wc)
    sum_y2 = np.bincount(flat, weights=(y ** 2).ravel(), minlength=hc * wc)
    mean_y = sum_y / counts
    var = sum_y2 / counts - mean_y ** 2

    gx, gy = _image_gradients(y)
    mag = np.sqrt(gx ** 2 + gy ** 2 + GRAD_EPS)
    theta = np.arctan2(gy, gx)
    t = (theta + np.pi) / (2 * np.pi) * N_BINS
    b0 = np.floor(t).astype(np.int64) % N_BINS
    b1 = (b0 + 1) % N_BINS
    w1 = t - np.floor(t)
    hist = np.zeros((hc * wc, N_BINS))
    np.add.at(hist, (flat, b0.ravel()), (mag * (1.0 - w1)).ravel())
    np.add.at(hist, (flat, b1.ravel()), (mag * w1).ravel())

    desc = np.concatenate([mean_ycc, hist, var[:, None]], axis=1)  # (cells, 12)
    norm = np.linalg.norm(desc, axis=1)
    out = desc / (norm + NORM_EPS)[:, None]
    parts = dict(ycc=ycc, y=y, cell=cell, counts=counts, mean_y=mean_y,
                 gx=gx, gy=gy, mag=mag, b0=b0, b1=b1, w1=w1,
                 desc=desc, norm=norm, hc=hc, wc=wc)
    return out, parts


def builtin_features(image) -> FeatureMap:
    image = np.asarray(image, dtype=np.float64)
    out, parts = _builtin_parts(image)
    data = out.reshape(parts["hc"], parts["wc"], 12).transpose(2, 0, 1)
    return FeatureMap(np.ascontiguousarray(data), source="builtin")


def builtin_features_backward(image, dl_dfeat) -> np.ndarray:
    """Adjoint of :func:`builtin_features`: maps a (12, Hc, Wc) feature
    gradient to an image gradient."""
    image = np.asarray(image, dtype=np.float64)
    _, p = _builtin_parts(image)
    hc, wc = p["hc"], p["wc"]
    g_out = np.asarray(dl_dfeat, dtype=np.float64).reshape(12, hc * wc).T  # (cells, 12)

    # undo the per-location L2 normalization
    desc, norm = p["desc"], p["norm"]
    denom = norm + NORM_EPS
    dot = np.sum(g_out * desc, axis=1)
    safe_norm = np.maximum(norm, 1e-30)
    g_desc = g_out / denom[:, None] - desc * (dot / (safe_norm * denom ** 2))[:, None]

    g_mean_ycc = g_desc[:, 0:3]
    g_hist = g_desc[:, 3:11]
    g_var = g_desc[:, 11]

    cell = p["cell"]
    flat = cell.ravel()
    counts = p["counts"]
    h, w = image.shape[:2]

    g_ycc = g_mean_ycc[flat].reshape(h, w, 3) / counts[flat].reshape(h, w, 1)
    g_y = g_var[flat].reshape(h, w) * 2.0 * (p["y"] - p["mean_y"][flat].reshape(h, w)) \
        / counts[flat].reshape(h, w)

    # histogram: magnitude and soft bin weights back to the two gradients
    b0, b1, w1, mag = p["b0"], p["b1"], p["w1"], p["mag"]
    gh0 = g_hist[flat, b0.ravel()].reshape(h, w)
    gh1 = g_hist[flat, b1.ravel()].reshape(h, w)
    g_mag = gh0 * (1.0 - w1) + gh1 * w1
    g_w1 = (gh1 - gh0) * mag
    gx, gy = p["gx"], p["gy"]
    r2 = mag ** 2
    dt_dtheta = N_BINS / (2 * np.pi)
    g_gx = g_mag * gx / mag + g_w1 * dt_dtheta * (-gy / r2)
    g_gy = g_mag * gy / mag + g_w1 * dt_dtheta * (gx / r2)
    g_y += _image_gradients_adjoint(g_gx, g_gy)

    g_ycc[:, :, 0] += g_y
    return g_ycc @ _YCC


def match_nearest(f_content: FeatureMap, f_ref: FeatureMap) -> GuidanceIndexMap:
    """Per content location, the reference location with minimal cosine
    distance; ties resolve to the smallest row-major reference index."""
    if f_content.channels != f_ref.channels:
        raise ValueError("feature maps must share the channel count")
    a = f_content.data.reshape(f_content.channels, -1).T
    b = f_ref.data.reshape(f_ref.channels, -1).T
    a = a / (np.linalg.norm(a, axis=1, keepdims=True) + NORM_EPS)
    b = b / (np.linalg.norm(b, axis=1, keepdims=True) + NORM_EPS)
    best = np.argmax(a @ b.T, axis=1)
    rows = (best // f_ref.width).reshape(f_content.height, f_content.width)
    cols = (best % f_ref.width).reshape(f_content.height, f_content.width)
    return GuidanceIndexMap(rows, cols, f_ref.height, f_ref.width)


def gather_guidance(guidance: GuidanceIndexMap, f_ref: FeatureMap) -> np.ndarray:
    """Reference features gathered at the matched locations, shaped like the
    content grid: (C, Hc, Wc)."""
    if f_ref.height != guidance.ref_height or f_ref.width != guidance.ref_width:
        raise ValueError("guidance was built for a different reference grid")
    return f_ref.data[:, guidance.target_rows, guidance.target_cols]


def cosine_distance_field(a, b):
    """Per-location cosine distance between (C, H, W) grids, with the
    gradient w.r.t. ``a``: returns (dist (H, W), grad (C, H, W))."""
    na = np.linalg.norm(a, axis=0)
    nb = np.linalg.norm(b, axis=0)
    ua = a / (na + NORM_EPS)
    ub = b / (nb + NORM_EPS)
    cos = np.sum(ua * ub, axis=0)
    dist = 1.0 - cos
    safe_na = np.maximum(na, 1e-30)
    dot_av = np.sum(a * ub, axis=0)
    g_a = -(ub / (na + NORM_EPS) - a * (dot_av / (safe_na * (na + NORM_EPS) ** 2)))
    return dist, g_a


def loss_tcm(f_stylized: FeatureMap, guidance: GuidanceIndexMap,
             f_styleref: FeatureMap, location_weights=None):
    """Mean cosine distance between stylized features and the gathered
    style-reference features.  Returns (loss, grad w.r.t. stylized data).

    ``location_weights`` (H, W) turns the plain mean into a weighted mean,
    e.g. to focus the loss on occluded locations; zero total weight gives a
    zero loss.
    """
    if f_stylized.data.shape[1:] != guidance.shape:
        raise ValueError("stylized feature grid does not match the guidance grid")
    target = gather_guidance(guidance, f_styleref)
    dist, g_a = cosine_distance_field(f_stylized.data, target)
    if location_weights is None:
        n_loc = dist.size
        return float(dist.mean()), g_a / n_loc
    wts = np.asarray(location_weights, dtype=np.float64)
    total = wts.sum()
    if total <= 1e-12:
        return 0.0, np.zeros_like(g_a)
    return float((dist * wts).sum() / total), g_a * (wts / total)


def patch_means(image, grid_shape):
    """Per-cell RGB means of ``image`` on a (Hc, Wc) stride grid; also
    returns the cell index map and pixel counts for the adjoint."""
    h, w = image.shape[:2]
    hc, wc = grid_shape
    stride_h = -(-h // hc)
    stride_w = -(-w // wc)
    rows = np.minimum(np.arange(h) // stride_h, hc - 1)
    cols = np.minimum(np.arange(w) // stride_w, wc - 1)
    cell = rows[:, None] * wc + cols[None, :]
    counts = np.bincount(cell.ravel(), minlength=hc * wc).astype(np.float64)
    sums = np.zeros((hc * wc, 3))
    np.add.at(sums, cell.ravel(), image.reshape(-1, 3))
    means = (sums / counts[:, None]).reshape(hc, wc, 3)
    return means, cell, counts


def loss_color(render, style_ref, guidance: GuidanceIndexMap,
               location_weights=None):
    """Coarse color matching: squared L2 distance between stride-patch means
    of the render and of the style reference at the matched locations,
    averaged over locations (optionally weighted per location).  Returns
    (loss, grad w.r.t. render)."""
    render = np.asarray(render, dtype=np.float64)
    style_ref = np.asarray(style_ref, dtype=np.float64)
    mr, cell, counts = patch_means(render, guidance.shape)
    ms, _, _ = patch_means(style_ref, (guidance.ref_height, guidance.ref_width))
    target = ms[guidance.target_rows, guidance.target_cols]
    diff = mr - target
    if location_weights is None:
        wts = np.ones(diff.shape[:2])
    else:
        wts = np.asarray(location_weights, dtype=np.float64)
    total = wts.sum()
    if total <= 1e-12:
        return 0.0, np.zeros_like(render)
    loss = float(np.sum(diff ** 2 * wts[..., None]) / total)
    g_mean = (2.0 / total) * (diff * wts[..., None]).reshape(-1, 3)
    grad = g_mean[cell.ravel()] / counts[cell.ravel()][:, None]
    return loss, grad.reshape(render.shape)
