import numpy as np
import pytest

from splatstyle.scene import GaussianScene, look_at_camera


def random_scene(rng, n, box=0.5, sigma_range=(0.05, 0.3),
                 opacity_range=(-1.5, 1.5), with_rest=False) -> GaussianScene:
    scene = GaussianScene(
        rng.uniform(-box, box, (n, 3)),
        rng.normal(size=(n, 4)),
        rng.uniform(np.log(sigma_range[0]), np.log(sigma_range[1]), (n, 3)),
        rng.uniform(*opacity_range, n),
        rng.uniform(-1.0, 1.0, (n, 3)),
        rng.normal(size=(n, 3, 3)) * 0.2 if with_rest else None,
    )
    scene.normalize_rotations()
    return scene


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_camera():
    return look_at_camera([0.0, 0.0, -2.0], [0.0, 0.0, 0.0],
                          width=16, height=16, focal=20)
