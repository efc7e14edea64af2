"""Synthetic desk-scale datasets rendered analytically (ray-plane
intersection), used by the training benchmarks, the warping oracles and the
demo scripts.

A dataset directory follows the on-disk layout the CLI consumes::

    root/
      images/0000.png ...
      cameras.json
      reference.png            (optional)
      reference_camera.json    (optional)
      features/                (optional FMAP files + manifest.json)
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import sceneio
from .scene import Camera, look_at_camera


def checkerboard_texture(tiles=6, c0=(0.92, 0.25, 0.2), c1=(0.15, 0.3, 0.85)):
    c0 = np.asarray(c0)
    c1 = np.asarray(c1)

    def tex(x, y):
        u = np.floor((x + 1.0) / 2.0 * tiles).astype(int)
        v = np.floor((y + 1.0) / 2.0 * tiles).astype(int)
        odd = ((u + v) % 2).astype(bool)
        out = np.where(odd[..., None], c1, c0)
        return out
    return tex


def smooth_checkerboard_texture(tiles=3, softness=0.05,
                                c0=(0.92, 0.25, 0.2), c1=(0.15, 0.3, 0.85)):
    """Band-limited checkerboard: smoothstep transitions of ``softness`` world
    units between cells, so the pattern is representable by finite splats."""
    c0 = np.asarray(c0)
    c1 = np.asarray(c1)
    period = 4.0 / tiles  # two cells per period over the [-1, 1] span

    s = max(softness, 1e-6) / period

    def square_wave(u):
        # soft 0/1 square wave with unit period (high on [0, 0.5))
        frac = u - np.floor(u)
        edge0 = np.clip((frac + s) / (2 * s), 0.0, 1.0)
        up = 3 * edge0 ** 2 - 2 * edge0 ** 3
        edge1 = np.clip((frac - (0.5 - s)) / (2 * s), 0.0, 1.0)
        down = 3 * edge1 ** 2 - 2 * edge1 ** 3
        return up - down

    def tex(x, y):
        sx = square_wave((x + 1.0) / period)
        sy = square_wave((y + 1.0) / period)
        # XOR-like soft combination: high where exactly one wave is high
        m = sx + sy - 2.0 * sx * sy
        return c0 + (c1 - c0) * m[..., None]
    return tex


def stripes_texture(stripes=8, c0=(0.9, 0.85, 0.2), c1=(0.2, 0.2, 0.25)):
    c0 = np.asarray(c0)
    c1 = np.asarray(c1)

    def tex(x, y):
        u = np.floor((x + 1.0) / 2.0 * stripes).astype(int)
        odd = (u % 2).astype(bool)
        return np.where(odd[..., None], c1, c0)
    return tex


def patterned_region_texture(base_tex=None, pattern_tex=None, center=(0.0, 0.0),
                             radius=0.62, edge=0.06):
    """A base texture with a high-frequency pattern inside a soft disc; the
    localized detail is what selective densification has to resolve."""
    if base_tex is None:
        base_tex = smooth_texture()
    if pattern_tex is None:
        pattern_tex = smooth_checkerboard_texture(tiles=8, softness=0.04)

    def tex(x, y):
        d = np.sqrt((x - center[0]) ** 2 + (y - center[1]) ** 2)
        t = np.clip((radius - d) / edge, 0.0, 1.0)
        m = (3 * t ** 2 - 2 * t ** 3)[..., None]
        return base_tex(x, y) * (1.0 - m) + pattern_tex(x, y) * m
    return tex


def smooth_texture(base=(0.55, 0.55, 0.6), tilt=0.1):
    base = np.asarray(base)

    def tex(x, y):
        shade = 1.0 + tilt * x
        return np.clip(base[None, :] * shade[..., None], 0.0, 1.0).reshape(x.shape + (3,))
    return tex


_BLOBS = [
    # (cx, cy, radius, r, g, b) -- broad soft discs over the base color
    (-0.55, -0.45, 0.42, 0.75, 0.45, 0.35),
    (0.5, -0.55, 0.38, 0.35, 0.62, 0.45),
    (0.55, 0.5, 0.45, 0.4, 0.45, 0.78),
    (-0.5, 0.55, 0.36, 0.72, 0.68, 0.4),
    (0.0, 0.05, 0.5, 0.48, 0.58, 0.62),
]


def blobby_texture(base=(0.55, 0.55, 0.6), tilt=0.22):
    """Low-frequency colored blobs over a biaxial chromatic gradient.

    Featureful enough that multi-view fitting pins the surface depth, far
    coarser than the stylization patterns, and chromatically unique per
    location (the gradient disambiguates otherwise-uniform regions for
    appearance-based correspondence matching)."""
    base = np.asarray(base)

    def tex(x, y):
        out = np.broadcast_to(base, x.shape + (3,)).copy()
        # biaxial gradient: red tracks x, green tracks y
        out = out + tilt * np.stack([0.5 * x, 0.5 * y, -0.2 * (x + y) / 2],
                                    axis=-1)
        for cx, cy, rad, r, g, b in _BLOBS:
            d = np.sqrt((x - cx) ** 2 + (y - cy) ** 2)
            t = np.clip((rad - d) / (0.45 * rad), 0.0, 1.0)
            m = (3 * t ** 2 - 2 * t ** 3)[..., None]
            out = out * (1.0 - 0.7 * m) + 0.7 * m * np.array([r, g, b])
        return np.clip(out, 0.0, 1.0)
    return tex


def render_quad_view(cam: Camera, texture, half=1.0, supersample=2):
    """Analytic image and center-ray depth of a textured quad in the z=0
    plane, viewed from ``cam``.  Background is black, depth 0."""
    h, w = cam.height, cam.width
    ss = supersample
    offs = (np.arange(ss) + 0.5) / ss - 0.5
    jj, ii = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    color = np.zeros((h, w, 3))
    R = cam.rotation
    C = cam.position
    for oy in offs:
        for ox in offs:
            dirs_cam = np.stack([(jj + ox - cam.cx) / cam.fx,
                                 (ii + oy - cam.cy) / cam.fy,
                                 np.ones_like(jj)], axis=-1)
            dirs = dirs_cam @ R  # camera -> world
            t = np.where(np.abs(dirs[..., 2]) > 1e-12, -C[2] / dirs[..., 2], -1.0)
            px = C[0] + t * dirs[..., 0]
            py = C[1] + t * dirs[..., 1]
            hit = (t > 0) & (np.abs(px) <= half) & (np.abs(py) <= half)
            tex = texture(px, py)
            color += np.where(hit[..., None], tex, 0.0)
    color /= ss * ss
    # center-ray depth (camera-space z of the hit point)
    dirs_cam = np.stack([(jj - cam.cx) / cam.fx, (ii - cam.cy) / cam.fy,
                         np.ones_like(jj)], axis=-1)
    dirs = dirs_cam @ R
    t = np.where(np.abs(dirs[..., 2]) > 1e-12, -C[2] / dirs[..., 2], -1.0)
    px = C[0] + t * dirs[..., 0]
    py = C[1] + t * dirs[..., 1]
    hit = (t > 0) & (np.abs(px) <= half) & (np.abs(py) <= half)
    depth = np.where(hit, t, 0.0)
    return color, depth


def arc_cameras(n_views, width=64, height=64, distance=2.6, max_angle_deg=35.0,
                elevation=0.18, focal=None):
    """Cameras on an arc in front of the z=0 quad, all looking at the
    origin."""
    cams = []
    angles = np.linspace(-np.radians(max_angle_deg), np.radians(max_angle_deg),
                         n_views)
    for k, a in enumerate(angles):
        eye = np.array([distance * np.sin(a),
                        elevation * distance * np.sin(2.3 * a + 0.4),
                        -distance * np.cos(a)])
        cams.append(look_at_camera(eye, [0, 0, 0], width=width, height=height,
                                   focal=focal, cam_id=k))
    return cams


def make_quad_dataset(n_views=8, width=64, height=64, texture=None,
                      supersample=2, distance=2.6, max_angle_deg=35.0):
    """Posed analytic views of a textured quad: (images, cameras, depths)."""
    if texture is None:
        texture = checkerboard_texture()
    cams = arc_cameras(n_views, width, height, distance, max_angle_deg)
    images, depths = [], []
    for cam in cams:
        img, dep = render_quad_view(cam, texture, supersample=supersample)
        images.append(img)
        depths.append(dep)
    return images, cams, depths


def benchmark_rig(n_views, width=64, height=64, max_angle_deg=35.0):
    """Camera rig for the training benchmarks: an arc with alternating
    distance and strong up/down elevation, which triangulates depth well."""
    cams = []
    angles = np.linspace(-np.radians(max_angle_deg), np.radians(max_angle_deg),
                         n_views)
    for k, a in enumerate(angles):
        dist = 2.3 if k % 2 == 0 else 2.9
        elev = 0.32 * dist * (1 if k % 2 else -1) * (0.6 + 0.4 * abs(np.sin(3 * a)))
        eye = np.array([dist * np.sin(a), elev, -dist * np.cos(a)])
        cams.append(look_at_camera(eye, [0, 0, 0], width=width, height=height,
                                   cam_id=k))
    return cams


def make_benchmark_dataset(n_train=8, width=64, height=64, tiles=4,
                           softness=0.1, supersample=4):
    """The calibrated pretraining benchmark: ``n_train`` posed views of a
    band-limited checkerboard quad plus one interleaved held-out view.

    Returns (train_images, train_cameras, test_image, test_camera).
    """
    cams = benchmark_rig(n_train + 1, width, height)
    tex = smooth_checkerboard_texture(tiles=tiles, softness=softness)
    images = [render_quad_view(c, tex, supersample=supersample)[0] for c in cams]
    hold = (n_train + 1) // 2
    train_images = [im for i, im in enumerate(images) if i != hold]
    train_cams = [c for i, c in enumerate(cams) if i != hold]
    for k, c in enumerate(train_cams):
        c.id = k
    test_cam = cams[hold]
    test_cam.id = n_train
    return train_images, train_cams, images[hold], test_cam


def render_two_plane_view(cam: Camera, fg_half=0.35, fg_z=-0.6,
                          fg_color=(0.9, 0.2, 0.2), bg_color=(0.2, 0.4, 0.9),
                          bg_half=1.4):
    """A small foreground square at z=fg_z occluding a background quad at
    z=0; returns (image, depth) with exact per-pixel depths."""
    h, w = cam.height, cam.width
    jj, ii = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    dirs_cam = np.stack([(jj - cam.cx) / cam.fx, (ii - cam.cy) / cam.fy,
                         np.ones_like(jj)], axis=-1)
    R = cam.rotation
    C = cam.position
    dirs = dirs_cam @ R
    color = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    for z0, halfsz, col in ((0.0, bg_half, bg_color), (fg_z, fg_half, fg_color)):
        t = np.where(np.abs(dirs[..., 2]) > 1e-12, (z0 - C[2]) / dirs[..., 2], -1.0)
        px = C[0] + t * dirs[..., 0]
        py = C[1] + t * dirs[..., 1]
        hit = (t > 0) & (np.abs(px) <= halfsz) & (np.abs(py) <= halfsz)
        # nearer surfaces overwrite (iteration goes back to front)
        color = np.where(hit[..., None], np.asarray(col), color)
        depth = np.where(hit, t, depth)
    return color, depth


def write_dataset(root, images, cameras, reference=None, reference_camera=None):
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for cam, img in zip(cameras, images):
        sceneio.write_image(root / "images" / f"{cam.id:04d}.png", img)
    sceneio.save_cameras(cameras, root / "cameras.json")
    if reference is not None:
        sceneio.write_image(root / "reference.png", reference)
        sceneio.save_cameras([reference_camera], root / "reference_camera.json")


def load_dataset(root):
    """Load a dataset directory; returns a dict with images, cameras and the
    optional reference pair."""
    root = Path(root)
    cams = sceneio.load_cameras(root / "cameras.json")
    images = []
    for cam in cams:
        path = root / "images" / f"{cam.id:04d}.png"
        if not path.exists():
            raise FileNotFoundError(f"missing image for camera {cam.id}: {path}")
        img = sceneio.read_image(path)
        if img.shape[:2] != (cam.height, cam.width):
            raise ValueError(f"image {path} does not match camera {cam.id} resolution")
        images.append(img)
    out = {"images": images, "cameras": cams, "reference": None, "reference_camera": None}
    ref_path = root / "reference.png"
    if ref_path.exists():
        out["reference"] = sceneio.read_image(ref_path)
        ref_cam = sceneio.load_cameras(root / "reference_camera.json")[0]
        if out["reference"].shape[:2] != (ref_cam.height, ref_cam.width):
            raise ValueError("reference image does not match its camera resolution")
        out["reference_camera"] = ref_cam
    return out
