"""Command-line entry points.

Subcommands: ``pretrain``, ``stylize``, ``render``, ``render-path``,
``gradcheck`` and ``bench``.  Every command is deterministic given ``--seed``
and records the fully-resolved configuration next to its outputs.  Worker
threads come from ``--threads`` or the ``REGS_THREADS`` environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import datasets, evaluate, sceneio
from .config import config_from_dict, config_to_dict, load_config
from .rasterizer import render
from .scene import Camera, GaussianScene
from .train import TrainConfig, pretrain, stylize


def _set_threads(args):
    n = args.threads or os.environ.get("REGS_THREADS")
    if n:
        import numba
        numba.set_num_threads(int(n))


def _resolve_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.iters is not None:
        cfg = replace(cfg, total_iters=max(args.iters, 1))
    if getattr(args, "extractor", None):
        cfg = replace(cfg, extractor=args.extractor)
    if getattr(args, "budget", None) is not None:
        cfg = replace(cfg, control=replace(cfg.control, max_gaussians=args.budget))
    return cfg


def _write_resolved(cfg: TrainConfig, out_path):
    Path(str(out_path) + ".config.json").write_text(
        json.dumps(config_to_dict(cfg), indent=1, sort_keys=True))


def cmd_pretrain(args) -> int:
    data = datasets.load_dataset(args.dataset)
    if not data["images"]:
        print("error: dataset has no images", file=sys.stderr)
        return 2
    cfg = _resolve_config(args)
    cfg = replace(cfg, metrics_path=str(args.out) + ".metrics.jsonl",
                  control_log_path=str(args.out) + ".control.jsonl")
    _write_resolved(cfg, args.out)
    if args.iters == 0:
        # dump the initialization untouched
        rng = np.random.default_rng(cfg.seed)
        from .train import init_scene
        scene = init_scene(data["cameras"], cfg.n_init, rng)
    else:
        scene = pretrain(data["images"], data["cameras"], cfg)
    sceneio.scene_save(scene, args.out)
    final = float(np.mean([evaluate.psnr(render(scene, c).color, im)
                           for im, c in zip(data["images"], data["cameras"])]))
    with open(str(args.out) + ".metrics.jsonl", "a") as f:
        f.write(json.dumps({"final_train_psnr": final, "n_gaussians": len(scene)}) + "\n")
    print(f"pretrained {len(scene)} splats, train-view PSNR {final:.2f} dB -> {args.out}")
    return 0


def cmd_stylize(args) -> int:
    data = datasets.load_dataset(args.dataset)
    if data["reference"] is None:
        print("error: dataset has no reference.png", file=sys.stderr)
        return 2
    scene = sceneio.scene_load(args.scene)
    cfg = _resolve_config(args)
    cfg = replace(cfg, metrics_path=str(args.out) + ".metrics.jsonl",
                  control_log_path=str(args.out) + ".control.jsonl")
    _write_resolved(cfg, args.out)
    styled = stylize(scene, data["reference"], data["reference_camera"],
                     data["cameras"], cfg)
    sceneio.scene_save(styled, args.out)
    print(f"stylized scene with {len(styled)} splats -> {args.out}")
    return 0


def cmd_render(args) -> int:
    scene = sceneio.scene_load(args.scene)
    cams = sceneio.load_cameras(args.cameras)
    if args.camera_id is not None:
        cams = [c for c in cams if c.id == args.camera_id]
        if not cams:
            print(f"error: no camera with id {args.camera_id}", file=sys.stderr)
            return 2
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    for cam in cams:
        out = render(scene, cam)
        sceneio.write_image(out_dir / f"view_{cam.id:04d}.png", out.color)
        if args.depth:
            sceneio.write_depth(out_dir / f"depth_{cam.id:04d}.png", out.depth)
    dt = time.perf_counter() - t0
    summary = {"frames": len(cams), "seconds": dt,
               "fps": len(cams) / dt if dt > 0 else float("inf")}
    (out_dir / "timing.json").write_text(json.dumps(summary))
    print(f"rendered {len(cams)} views -> {out_dir} ({summary['fps']:.1f} fps)")
    return 0


def _interpolate_pose(cam_a: Camera, cam_b: Camera, s: float) -> Camera:
    from scipy.spatial.transform import Rotation, Slerp
    rots = Rotation.from_matrix(np.stack([cam_a.rotation, cam_b.rotation]))
    R = Slerp([0.0, 1.0], rots)(s).as_matrix()
    center = (1 - s) * cam_a.position + s * cam_b.position
    w2c = np.eye(4)
    w2c[:3, :3] = R
    w2c[:3, 3] = -R @ center
    return cam_a.with_pose(w2c)


def cmd_render_path(args) -> int:
    scene = sceneio.scene_load(args.scene)
    spec = json.loads(Path(args.path_spec).read_text())
    cams = sceneio.load_cameras(args.cameras)
    by_id = {c.id: c for c in cams}
    cam_a, cam_b = by_id[spec["start_id"]], by_id[spec["end_id"]]
    n = int(spec.get("frames", 30))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    for k in range(n):
        s = 0.0 if n == 1 else k / (n - 1)
        cam = _interpolate_pose(cam_a, cam_b, s)
        out = render(scene, cam)
        sceneio.write_image(out_dir / f"frame_{k:04d}.png", out.color)
    dt = time.perf_counter() - t0
    summary = {"frames": n, "seconds": dt, "fps": n / dt if dt > 0 else float("inf")}
    (out_dir / "timing.json").write_text(json.dumps(summary))
    print(f"rendered {n}-frame path -> {out_dir} ({summary['fps']:.1f} fps)")
    return 0


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    from .scene import look_at_camera
    n = 12
    scene = GaussianScene(
        rng.uniform(-0.5, 0.5, (n, 3)), rng.normal(size=(n, 4)),
        rng.uniform(np.log(0.05), np.log(0.3), (n, 3)),
        rng.uniform(-1.5, 1.5, n), rng.uniform(-1.0, 1.0, (n, 3)))
    scene.normalize_rotations()
    cam = look_at_camera([0, 0, -2.0], [0, 0, 0], width=16, height=16, focal=20)
    report = evaluate.gradcheck(scene, cam, tol=args.tol)
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=1))
    print(f"gradcheck max relative error {report['max_rel_error']:.2e} "
          f"(tol {report['tol']:.0e}): {'PASS' if report['passed'] else 'FAIL'}")
    return 0 if report["passed"] else 1


def _bench_control(seed):
    from .benchscenes import coarse_quad_setup
    setup = coarse_quad_setup(seed=seed)
    report = evaluate.control_benchmark(setup["content_scene"], setup["style"],
                                        setup["ref_cam"], setup["cameras"],
                                        setup["cfg"], budget=200)
    return report


def cmd_bench(args) -> int:
    seed = args.seed if args.seed is not None else 0
    if args.scenario == "control":
        report = _bench_control(seed)
    elif args.scenario == "throughput":
        from .benchscenes import random_cloud
        cam = datasets.arc_cameras(1, width=128, height=128)[0]
        fit = evaluate.throughput_linearity(
            lambda n: random_cloud(n, seed), cam, [1000, 3000, 10000, 30000, 100000])
        report = evaluate.BenchmarkReport("throughput_linearity", metrics=fit)
    else:
        print(f"error: unknown scenario {args.scenario!r}", file=sys.stderr)
        return 2
    if args.out:
        Path(args.out).write_text(report.to_json())
    print(report.to_json())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splatstyle")
    p.add_argument("--threads", type=int, default=None)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dataset=False, scene=False):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--iters", type=int, default=None)
        sp.add_argument("--config", default=None)
        if dataset:
            sp.add_argument("--dataset", required=True)
        if scene:
            sp.add_argument("--scene", required=True)

    sp = sub.add_parser("pretrain", help="fit a scene to posed images")
    common(sp, dataset=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--budget", type=int, default=None)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("stylize", help="re-optimize appearance to a reference")
    common(sp, dataset=True, scene=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--extractor", default=None,
                    help="builtin or file:<dir> of FMAP features")
    sp.add_argument("--budget", type=int, default=None)
    sp.set_defaults(func=cmd_stylize)

    sp = sub.add_parser("render", help="render views of a scene")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--cameras", required=True)
    sp.add_argument("--camera-id", type=int, default=None)
    sp.add_argument("--depth", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("render-path", help="render an interpolated camera path")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--cameras", required=True)
    sp.add_argument("--path-spec", required=True,
                    help='JSON {"start_id", "end_id", "frames"}')
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_render_path)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient check")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--tol", type=float, default=1e-3)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("bench", help="run a benchmark scenario")
    sp.add_argument("--scenario", required=True)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _set_threads(args)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
