"""Scene representation: splats, cameras, and the math that turns parameters
into covariances and colors.

Conventions (shared by every module):

- rotations are unit quaternions in ``(w, x, y, z)`` order,
- per-axis standard deviations are stored as natural logs,
- opacity is stored as a logit; ``sigmoid`` maps it into (0, 1),
- the rendered diffuse color is ``0.5 + SH_C0 * color_dc`` (clamped to >= 0),
  which keeps scene files interoperable with common splatting exports.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199

# Scales below exp(MIN_LOG_SCALE) are clamped so covariances stay invertible.
MIN_LOG_SCALE = -20.0


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def inverse_sigmoid(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


@dataclass
class Gaussian3D:
    """A single splat: position, orientation, per-axis log-scale, opacity
    logit and color coefficients (DC plus optional degree-1 SH)."""

    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    color_dc: np.ndarray
    color_rest: np.ndarray | None = None  # (3, 3): three linear SH coeffs per channel

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        self.color_dc = np.asarray(self.color_dc, dtype=np.float64).reshape(3)
        if self.color_rest is not None:
            self.color_rest = np.asarray(self.color_rest, dtype=np.float64).reshape(3, 3)
        n = np.linalg.norm(self.rotation)
        if n == 0.0:
            raise ValueError("all-zero quaternion")
        self.rotation = self.rotation / n

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


class GaussianScene:
    """Array-of-splats scene model plus the per-splat control statistics.

    Parameter arrays are float64 and always share a common length; the
    statistic arrays (``color_grad_accum``, ``pos_grad_accum``,
    ``contrib_count``) track it across every split/prune event.  ``revision``
    increments on any mutation so a backward pass can detect that its
    matching forward render is stale.
    """

    def __init__(self, positions, rotations, log_scales, opacity_logits,
                 colors_dc, colors_rest=None):
        self.positions = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.rotations = np.ascontiguousarray(rotations, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.ascontiguousarray(log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.ascontiguousarray(opacity_logits, dtype=np.float64).reshape(n)
        self.colors_dc = np.ascontiguousarray(colors_dc, dtype=np.float64).reshape(n, 3)
        if colors_rest is None:
            self.colors_rest = None
        else:
            self.colors_rest = np.ascontiguousarray(colors_rest, dtype=np.float64).reshape(n, 3, 3)
        self.color_grad_accum = np.zeros(n)
        self.pos_grad_accum = np.zeros(n)
        self.contrib_count = np.zeros(n, dtype=np.int64)
        self.revision = 0

    def __len__(self):
        return len(self.positions)

    @classmethod
    def empty(cls) -> "GaussianScene":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
                   np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def from_gaussians(cls, gaussians) -> "GaussianScene":
        gaussians = list(gaussians)
        if not gaussians:
            return cls.empty()
        rest = None
        if any(g.color_rest is not None for g in gaussians):
            rest = np.stack([g.color_rest if g.color_rest is not None
                             else np.zeros((3, 3)) for g in gaussians])
        return cls(
            np.stack([g.position for g in gaussians]),
            np.stack([g.rotation for g in gaussians]),
            np.stack([g.log_scale for g in gaussians]),
            np.array([g.opacity_logit for g in gaussians], dtype=np.float64),
            np.stack([g.color_dc for g in gaussians]),
            rest,
        )

    def gaussian(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            self.positions[i].copy(), self.rotations[i].copy(),
            self.log_scales[i].copy(), float(self.opacity_logits[i]),
            self.colors_dc[i].copy(),
            None if self.colors_rest is None else self.colors_rest[i].copy(),
        )

    def copy(self) -> "GaussianScene":
        s = GaussianScene(self.positions.copy(), self.rotations.copy(),
                          self.log_scales.copy(), self.opacity_logits.copy(),
                          self.colors_dc.copy(),
                          None if self.colors_rest is None else self.colors_rest.copy())
        s.color_grad_accum = self.color_grad_accum.copy()
        s.pos_grad_accum = self.pos_grad_accum.copy()
        s.contrib_count = self.contrib_count.copy()
        return s

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def extent(self) -> float:
        """Diameter of the bounding box of the splat centers."""
        if len(self) == 0:
            return 0.0
        span = self.positions.max(axis=0) - self.positions.min(axis=0)
        return float(np.linalg.norm(span))

    def normalize_rotations(self):
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise ValueError("all-zero quaternion in scene")
        self.rotations /= norms

    def reset_stats(self):
        n = len(self)
        self.color_grad_accum = np.zeros(n)
        self.pos_grad_accum = np.zeros(n)
        self.contrib_count = np.zeros(n, dtype=np.int64)

    def mark_mutated(self):
        self.revision += 1

    def check_consistent(self):
        n = len(self)
        assert self.rotations.shape == (n, 4)
        assert self.log_scales.shape == (n, 3)
        assert self.opacity_logits.shape == (n,)
        assert self.colors_dc.shape == (n, 3)
        assert self.color_grad_accum.shape == (n,)
        assert self.pos_grad_accum.shape == (n,)
        assert self.contrib_count.shape == (n,)


@dataclass
class Camera:
    """Pinhole camera: ``u = fx * x/z + cx``, ``v = fy * y/z + cy`` in pixel
    coordinates, where ``(x, y, z)`` is the world point mapped through
    ``world_to_camera``.  Pixel ``(row i, col j)`` samples at ``(u, v) = (j, i)``.
    """

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray = field(default_factory=lambda: np.eye(4))
    id: int = 0

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        R = self.world_to_camera[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise ValueError("world_to_camera rotation block must be orthonormal with det +1")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_cam_points(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return points @ self.rotation.T + self.translation

    def cam_to_world_points(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return (points - self.translation) @ self.rotation

    def with_pose(self, world_to_camera) -> "Camera":
        return Camera(self.width, self.height, self.fx, self.fy, self.cx, self.cy,
                      np.asarray(world_to_camera, dtype=np.float64), self.id)


def look_at_camera(eye, target, up=(0.0, 1.0, 0.0), width=64, height=64,
                   focal=None, cam_id=0) -> Camera:
    """Camera at ``eye`` looking toward ``target`` (camera +z axis)."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-12:
        up = np.array([0.0, 0.0, 1.0]) if abs(fwd[1]) > 0.9 else np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])  # world -> camera rows
    t = -R @ eye
    w2c = np.eye(4)
    w2c[:3, :3] = R
    w2c[:3, 3] = t
    if focal is None:
        focal = 1.2 * max(width, height)
    return Camera(width, height, focal, focal, (width - 1) / 2.0, (height - 1) / 2.0,
                  w2c, cam_id)


def quat_to_rotation(q) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion; normalizes internally."""
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("all-zero quaternion")
    w, x, y, z = q / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quats_to_rotations(quats) -> np.ndarray:
    """Vectorized ``quat_to_rotation`` for an (N, 4) array."""
    quats = np.asarray(quats, dtype=np.float64).reshape(-1, 4)
    n = np.linalg.norm(quats, axis=1)
    if np.any(n == 0.0):
        raise ValueError("all-zero quaternion")
    w, x, y, z = (quats / n[:, None]).T
    R = np.empty((len(quats), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def build_covariance(g: Gaussian3D) -> np.ndarray:
    """World covariance R * S * S^T * R^T with S = diag(exp(log_scale))."""
    R = quat_to_rotation(g.rotation)
    M = R * np.exp(g.log_scale)[None, :]
    return M @ M.T


def build_covariances(rotations, log_scales) -> np.ndarray:
    R = quats_to_rotations(rotations)
    M = R * np.exp(np.asarray(log_scales, dtype=np.float64))[:, None, :]
    return M @ np.transpose(M, (0, 2, 1))


def eval_gaussian(g: Gaussian3D, x) -> float:
    """Unnormalized Gaussian influence exp(-0.5 (x-mu)^T Sigma^-1 (x-mu))."""
    x = np.asarray(x, dtype=np.float64).reshape(3)
    log_scale = np.clip(g.log_scale, MIN_LOG_SCALE, None)
    R = quat_to_rotation(g.rotation)
    # In the splat frame the quadratic form is diagonal.
    local = R.T @ (x - g.position)
    q = np.sum((local / np.exp(log_scale)) ** 2)
    return float(np.exp(-0.5 * q))


def eval_color(g: Gaussian3D, view_dir, degree: int = 0) -> np.ndarray:
    """Diffuse (degree 0) or linear SH (degree 1) RGB, clamped to >= 0.

    ``view_dir`` is the unit vector from the camera center toward the splat.
    """
    if degree not in (0, 1):
        raise ValueError("degree must be 0 or 1")
    if degree == 1 and g.color_rest is None:
        raise ValueError("requested SH degree exceeds stored coefficients")
    c = 0.5 + SH_C0 * g.color_dc
    if degree == 1:
        x, y, z = np.asarray(view_dir, dtype=np.float64).reshape(3)
        c = c - SH_C1 * y * g.color_rest[0] + SH_C1 * z * g.color_rest[1] \
            - SH_C1 * x * g.color_rest[2]
    return np.maximum(c, 0.0)


def eval_colors(scene: GaussianScene, cam_position, degree: int = 0) -> np.ndarray:
    """Per-splat RGB for a whole scene viewed from ``cam_position``."""
    if degree not in (0, 1):
        raise ValueError("degree must be 0 or 1")
    c = 0.5 + SH_C0 * scene.colors_dc
    if degree == 1:
        if scene.colors_rest is None:
            raise ValueError("requested SH degree exceeds stored coefficients")
        d = scene.positions - np.asarray(cam_position, dtype=np.float64)[None, :]
        d = d / np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
        x, y, z = d[:, 0:1], d[:, 1:2], d[:, 2:3]
        c = c - SH_C1 * y * scene.colors_rest[:, 0] + SH_C1 * z * scene.colors_rest[:, 1] \
            - SH_C1 * x * scene.colors_rest[:, 2]
    return np.maximum(c, 0.0)
