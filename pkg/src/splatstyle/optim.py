"""First-order moment-based optimizer over the five splat parameter groups.

Moment buffers live per group and are remapped whenever density control
changes the splat count; splats created by a split start from zero moments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scene import GaussianScene
from .rasterizer import GradBuffers

GROUPS = ("position", "rotation", "log_scale", "opacity_logit", "color_dc")


@dataclass
class LearningRates:
    position: float = 1.6e-4  # multiplied by the scene extent by the loops
    rotation: float = 1e-3
    log_scale: float = 5e-3
    opacity_logit: float = 5e-2
    color_dc: float = 2.5e-2

    def scaled(self, extent: float) -> "LearningRates":
        return LearningRates(self.position * extent, self.rotation,
                             self.log_scale, self.opacity_logit, self.color_dc)


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15

    @classmethod
    def for_scene(cls, scene: GaussianScene, **kw) -> "OptimizerState":
        state = cls(**kw)
        shapes = _group_shapes(len(scene))
        state.m = {g: np.zeros(s) for g, s in shapes.items()}
        state.v = {g: np.zeros(s) for g, s in shapes.items()}
        return state

    def remap(self, keep, n_new: int = 0):
        """Keep moment rows of surviving splats (boolean mask or index array)
        and append zero rows for newly created ones."""
        for buf in (self.m, self.v):
            for g in GROUPS:
                kept = buf[g][keep]
                if n_new:
                    pad = np.zeros((n_new,) + kept.shape[1:])
                    kept = np.concatenate([kept, pad])
                buf[g] = kept


def _group_shapes(n):
    return {"position": (n, 3), "rotation": (n, 4), "log_scale": (n, 3),
            "opacity_logit": (n,), "color_dc": (n, 3)}


def _group_arrays(scene: GaussianScene):
    return {"position": scene.positions, "rotation": scene.rotations,
            "log_scale": scene.log_scales, "opacity_logit": scene.opacity_logits,
            "color_dc": scene.colors_dc}


def _group_grads(grads: GradBuffers):
    return {"position": grads.d_position, "rotation": grads.d_rotation,
            "log_scale": grads.d_log_scale, "opacity_logit": grads.d_opacity_logit,
            "color_dc": grads.d_color_dc}


def adam_step(scene: GaussianScene, grads: GradBuffers, state: OptimizerState,
              lrs: LearningRates):
    """One adaptive update on every parameter group; quaternions are
    renormalized afterwards."""
    n = len(scene)
    for g, buf in state.m.items():
        if buf.shape[0] != n:
            raise RuntimeError("optimizer state does not match the scene size")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    params = _group_arrays(scene)
    gradmap = _group_grads(grads)
    for g in GROUPS:
        grad = gradmap[g]
        state.m[g] = b1 * state.m[g] + (1 - b1) * grad
        state.v[g] = b2 * state.v[g] + (1 - b2) * grad ** 2
        m_hat = state.m[g] / (1 - b1 ** t)
        v_hat = state.v[g] / (1 - b2 ** t)
        params[g] -= getattr(lrs, g) * m_hat / (np.sqrt(v_hat) + state.eps)
    scene.normalize_rotations()
    scene.mark_mutated()
