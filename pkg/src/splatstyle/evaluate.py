"""Metrics, oracles and benchmark protocols.

The benchmarks reproduce, at desk scale, the qualitative findings the full
pipeline is built around: texture-guided control beats positional control at
equal budget, depth regularization pins geometry, and pseudo-view supervision
improves cross-view consistency.  Absolute large-scene numbers are out of
reach on CPU and are reported as protocol outputs only.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from dataclasses import replace as dc_replace

import numpy as np

from . import stylize as sty
from .rasterizer import backward, render
from .scene import Camera, GaussianScene
from .train import TrainConfig, stylize

PSNR_CAP = 99.0


def l1(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.abs(a - b).mean())


def psnr(a, b) -> float:
    """10*log10(1/MSE) for images in [0, 1]; identical images cap at 99 dB."""
    mse = float(np.mean((np.asarray(a, dtype=np.float64)
                         - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(float(10.0 * np.log10(1.0 / mse)), PSNR_CAP)


def gradcheck(scene: GaussianScene, cam: Camera, target=None, tol: float = 1e-3,
              step: float = 1e-4) -> dict:
    """Central finite differences against the analytic backward for every
    parameter of every splat, under a scalar L1 image loss."""
    if target is None:
        rng = np.random.default_rng(0)
        target = rng.uniform(0.0, 1.0, (cam.height, cam.width, 3))

    def loss_of(s):
        return float(np.abs(render(s, cam).color - target).mean())

    out = render(scene, cam)
    dl = np.sign(out.color - target) / out.color.size
    grads = backward(scene, cam, dl, np.zeros((cam.height, cam.width)), out)

    groups = [("position", scene.positions, grads.d_position),
              ("rotation", scene.rotations, grads.d_rotation),
              ("log_scale", scene.log_scales, grads.d_log_scale),
              ("opacity_logit", scene.opacity_logits, grads.d_opacity_logit),
              ("color_dc", scene.colors_dc, grads.d_color_dc)]
    worst = 0.0
    worst_at = None
    for name, arr, analytic in groups:
        flat = arr.reshape(len(scene), -1)
        g = analytic.reshape(len(scene), -1)
        for i in range(flat.shape[0]):
            for j in range(flat.shape[1]):
                orig = flat[i, j]
                flat[i, j] = orig + step
                scene.mark_mutated()
                lp = loss_of(scene)
                flat[i, j] = orig - step
                scene.mark_mutated()
                lm = loss_of(scene)
                flat[i, j] = orig
                scene.mark_mutated()
                fd = (lp - lm) / (2.0 * step)
                rel = abs(g[i, j] - fd) / max(abs(g[i, j]), abs(fd), 1e-10)
                if rel > worst:
                    worst = rel
                    worst_at = (name, i, j, float(g[i, j]), float(fd))
    return {"max_rel_error": worst, "worst": worst_at, "tol": tol,
            "passed": bool(worst < tol)}


@dataclass
class BenchmarkReport:
    scenario: str
    metrics: dict = field(default_factory=dict)
    budgets: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text) -> "BenchmarkReport":
        d = json.loads(text)
        return cls(d["scenario"], d["metrics"], d["budgets"], d["notes"])


def control_benchmark(content_scene: GaussianScene, style_ref, ref_cam,
                      cameras, cfg: TrainConfig, budget: int) -> BenchmarkReport:
    """Stylize the same coarse scene three ways under one added-splat budget
    (texture-guided, positional baseline, no densification) and report the
    final reference-view L1 of each arm."""
    if 0 < budget < 8:
        raise ValueError("budget smaller than one split (8)")
    report = BenchmarkReport("control_effectiveness")
    cap = len(content_scene) + budget
    for mode in ("texture", "positional", "none"):
        arm_cfg = dc_replace(cfg, control_mode=mode,
                             control=dc_replace(cfg.control, max_gaussians=cap),
                             metrics_path=None, control_log_path=None)
        styled = stylize(content_scene.copy(), style_ref, ref_cam, cameras, arm_cfg)
        err = l1(render(styled, ref_cam).color, style_ref)
        report.metrics[f"l1_{mode}"] = err
        report.budgets[mode] = len(styled)
    report.notes.append(f"budget +{budget} splats over {len(content_scene)}")
    return report


def consistency_score(scene: GaussianScene, camera_pairs,
                      eps_abs: float = 0.0) -> float:
    """Cross-view photometric consistency: warp the render of pose A into
    pose B using A's rendered depth and take the masked L1 against the render
    at B, averaged over pairs.  Lower is more consistent."""
    scores = []
    for cam_a, cam_b in camera_pairs:
        out_a = render(scene, cam_a)
        out_b = render(scene, cam_b)
        pv = sty.synthesize_pseudo_view(out_a.color, sty.warp_depth(out_a), cam_a,
                                        cam_b, sty.warp_depth(out_b), eps_abs=eps_abs)
        if pv.mask.sum() == 0:
            scores.append(0.0)
            continue
        scores.append(float(np.abs(out_b.color[pv.mask] - pv.image[pv.mask]).mean()))
    return float(np.mean(scores)) if scores else 0.0


def robustness_protocol(content_scene: GaussianScene, style_ref, ref_cam,
                        cameras, cfg: TrainConfig, held_cam: Camera,
                        path_cameras, second_seed: int | None = None) -> dict:
    """Re-stylization robustness: stylize, render a new reference from a held
    camera, stylize a fresh copy of the content scene against it, and report
    the mean PSNR between both stylized models along a fixed camera path."""
    base_cfg = dc_replace(cfg, metrics_path=None, control_log_path=None)
    m_b = stylize(content_scene.copy(), style_ref, ref_cam, cameras, base_cfg)
    new_ref = render(m_b, held_cam).color
    second = dc_replace(base_cfg, seed=cfg.seed if second_seed is None else second_seed)
    m_2 = stylize(content_scene.copy(), new_ref, held_cam, cameras, second)
    values = [psnr(render(m_b, c).color, render(m_2, c).color) for c in path_cameras]
    return {"psnr_mean": float(np.mean(values)), "psnr_per_view": values}


def throughput(scene: GaussianScene, cam: Camera, repeats: int = 5) -> dict:
    """Wall-clock rendering speed: mean/stdev seconds per frame, frames/sec
    and splats/sec over repeated renders (one warm-up render excluded)."""
    render(scene, cam)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        render(scene, cam)
        times.append(time.perf_counter() - t0)
    times = np.array(times)
    mean = float(times.mean())
    return {"seconds_mean": mean, "seconds_std": float(times.std()),
            "fps": 1.0 / mean if mean > 0 else float("inf"),
            "splats_per_sec": len(scene) / mean if mean > 0 else float("inf"),
            "n_gaussians": len(scene), "repeats": repeats}


def throughput_linearity(make_scene, cam: Camera, counts, repeats: int = 3) -> dict:
    """Linear fit of render time against splat count; reports R^2."""
    ts = []
    for n in counts:
        scene = make_scene(n)
        ts.append(throughput(scene, cam, repeats)["seconds_mean"])
    x = np.asarray(counts, dtype=np.float64)
    y = np.asarray(ts)
    coeffs = np.polyfit(x, y, 1)
    pred = np.polyval(coeffs, x)
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return {"counts": [int(c) for c in counts], "seconds": [float(v) for v in y],
            "slope": float(coeffs[0]), "intercept": float(coeffs[1]), "r2": r2}
