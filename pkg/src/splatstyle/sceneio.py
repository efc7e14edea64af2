"""File formats: binary PLY scenes, camera JSON, PNG images, 16-bit depth
PNGs with a sidecar scale, and FMAP feature files.

The scene PLY is binary little-endian with float32 vertex properties in this
exact order::

    x y z scale_0 scale_1 scale_2 rot_0 rot_1 rot_2 rot_3 opacity
    f_dc_0 f_dc_1 f_dc_2 [f_rest_0 .. f_rest_8]

Scales are stored as logs, rotations as (w, x, y, z), opacity as a logit.
The nine optional ``f_rest`` values are the degree-1 SH coefficients in
channel-major order (three coefficients for R, then G, then B).  Values pass
through float32 on disk, so a scene whose parameters are float32-representable
round-trips bit-exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .scene import Camera, GaussianScene


class SceneDecodeError(ValueError):
    """Base class for scene-file decoding failures."""


class PlyHeaderError(SceneDecodeError):
    """Malformed or unsupported PLY header."""


class PlyVersionError(SceneDecodeError):
    """PLY format/version line is not binary_little_endian 1.0."""


class PlyPayloadError(SceneDecodeError):
    """Vertex payload shorter than the header promises."""


_BASE_PROPS = ["x", "y", "z", "scale_0", "scale_1", "scale_2",
               "rot_0", "rot_1", "rot_2", "rot_3", "opacity",
               "f_dc_0", "f_dc_1", "f_dc_2"]
_REST_PROPS = [f"f_rest_{i}" for i in range(9)]


def scene_save(scene: GaussianScene, path):
    """Write a scene as binary little-endian PLY (float32 payload)."""
    props = list(_BASE_PROPS)
    with_rest = scene.colors_rest is not None
    if with_rest:
        props += _REST_PROPS
    n = len(scene)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in props]
    header.append("end_header")
    cols = [scene.positions, scene.log_scales, scene.rotations,
            scene.opacity_logits[:, None], scene.colors_dc]
    if with_rest:
        # (N, coeff, channel) -> channel-major flat layout
        cols.append(np.transpose(scene.colors_rest, (0, 2, 1)).reshape(n, 9))
    payload = np.concatenate(cols, axis=1).astype("<f4") if n else np.zeros((0, len(props)), "<f4")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(payload.tobytes())


def scene_load(path) -> GaussianScene:
    """Read a scene PLY written by :func:`scene_save`."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if end < 0:
        raise PlyHeaderError("missing end_header")
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    if not lines or lines[0].strip() != "ply":
        raise PlyHeaderError("not a PLY file")
    if len(lines) < 2 or not lines[1].startswith("format"):
        raise PlyHeaderError("missing format line")
    if lines[1].strip() != "format binary_little_endian 1.0":
        raise PlyVersionError(f"unsupported PLY format: {lines[1].strip()!r}")
    n = None
    props = []
    for line in lines[2:]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "element":
            if len(parts) != 3 or parts[1] != "vertex":
                raise PlyHeaderError(f"unsupported element: {line!r}")
            n = int(parts[2])
        elif parts[0] == "property":
            if len(parts) != 3 or parts[1] != "float":
                raise PlyHeaderError(f"unsupported property: {line!r}")
            props.append(parts[2])
        else:
            raise PlyHeaderError(f"unexpected header line: {line!r}")
    if n is None:
        raise PlyHeaderError("missing vertex element")
    if props != _BASE_PROPS and props != _BASE_PROPS + _REST_PROPS:
        raise PlyHeaderError(f"unexpected property layout: {props}")
    with_rest = len(props) == len(_BASE_PROPS) + 9
    body = data[end + len(b"end_header\n"):]
    expected = n * len(props) * 4
    if len(body) < expected:
        raise PlyPayloadError(f"payload has {len(body)} bytes, expected {expected}")
    arr = np.frombuffer(body[:expected], dtype="<f4").reshape(n, len(props)).astype(np.float64)
    rest = None
    if with_rest:
        rest = np.transpose(arr[:, 14:23].reshape(n, 3, 3), (0, 2, 1))
    return GaussianScene(arr[:, 0:3], arr[:, 6:10], arr[:, 3:6], arr[:, 10],
                         arr[:, 11:14], rest)


def save_cameras(cameras, path):
    records = [{
        "id": int(c.id), "width": int(c.width), "height": int(c.height),
        "fx": float(c.fx), "fy": float(c.fy), "cx": float(c.cx), "cy": float(c.cy),
        "world_to_camera": [float(v) for v in c.world_to_camera.reshape(16)],
    } for c in cameras]
    Path(path).write_text(json.dumps(records, indent=1))


def load_cameras(path) -> list[Camera]:
    records = json.loads(Path(path).read_text())
    cams = []
    for r in records:
        w2c = np.array(r["world_to_camera"], dtype=np.float64).reshape(4, 4)
        cams.append(Camera(r["width"], r["height"], r["fx"], r["fy"],
                           r["cx"], r["cy"], w2c, r.get("id", len(cams))))
    return cams


def write_image(path, img):
    """Write an HxWx3 float image in [0, 1] as 8-bit RGB PNG."""
    img = np.asarray(img)
    u8 = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path)


def read_image(path) -> np.ndarray:
    """Read an RGB PNG as an HxWx3 float64 image in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_depth(path, depth):
    """Write a depth map as 16-bit grayscale PNG plus a sidecar JSON holding
    the max-depth scale factor."""
    depth = np.asarray(depth, dtype=np.float64)
    max_depth = float(depth.max()) if depth.size and depth.max() > 0 else 1.0
    u16 = np.clip(np.round(depth / max_depth * 65535.0), 0, 65535).astype(np.uint16)
    Image.fromarray(u16).save(path)
    Path(str(path) + ".json").write_text(json.dumps({"max_depth": max_depth}))


def read_depth(path) -> np.ndarray:
    with Image.open(path) as im:
        u16 = np.asarray(im, dtype=np.float64)
    meta = json.loads(Path(str(path) + ".json").read_text())
    return u16 / 65535.0 * float(meta["max_depth"])


FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1


class FmapError(ValueError):
    """Malformed FMAP feature file."""


def write_fmap(path, data):
    """Write a (C, H, W) float32 feature grid as an FMAP file."""
    data = np.ascontiguousarray(data, dtype="<f4")
    if data.ndim != 3:
        raise ValueError("feature data must be (C, H, W)")
    c, h, w = data.shape
    with open(path, "wb") as f:
        f.write(FMAP_MAGIC)
        f.write(struct.pack("<IIII", FMAP_VERSION, c, h, w))
        f.write(data.tobytes())


def read_fmap(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:4] != FMAP_MAGIC:
        raise FmapError("not an FMAP file")
    version, c, h, w = struct.unpack("<IIII", raw[4:20])
    if version != FMAP_VERSION:
        raise FmapError(f"unsupported FMAP version {version}")
    expected = 20 + c * h * w * 4
    if len(raw) < expected:
        raise FmapError(f"FMAP payload has {len(raw) - 20} bytes, expected {c * h * w * 4}")
    return np.frombuffer(raw[20:expected], dtype="<f4").reshape(c, h, w).copy()
