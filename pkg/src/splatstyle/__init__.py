"""Desk-scale differentiable Gaussian splatting and reference-based stylization.

The package is organized as a small numpy/numba library:

- ``scene``      splat containers, quaternion/covariance math, SH color
- ``sceneio``    PLY scenes, camera JSON, PNG images, FMAP feature files
- ``rasterizer`` differentiable tile-based renderer (forward + analytic backward)
- ``control``    adaptive density control (texture-guided and positional)
- ``features``   builtin descriptor extractor and nearest-neighbor matching
- ``stylize``    pseudo-view synthesis and the stylization losses
- ``optim``      moment-based optimizer with scene-resize support
- ``train``      pretraining and stylization loops
- ``evaluate``   metrics, gradient checks and benchmark protocols
- ``datasets``   synthetic desk-scale datasets
- ``cli``        command-line entry points
"""

from .scene import Camera, Gaussian3D, GaussianScene
from .rasterizer import RenderOutput, render, render_brute_force, backward

__all__ = [
    "Camera",
    "Gaussian3D",
    "GaussianScene",
    "RenderOutput",
    "render",
    "render_brute_force",
    "backward",
]

__version__ = "0.1.0"
