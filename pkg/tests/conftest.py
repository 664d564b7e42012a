"""Shared fixtures: a miniature system small enough for millisecond
simulations plus cached desk-scale artifacts for the expensive suites."""
from __future__ import annotations

import numpy as np
import pytest
import torch

from pactkit import forward, geometry

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_config() -> geometry.SystemConfig:
    """A shrunken bowl (30 mm radius) whose 512-sample window covers every
    arrival from sources within ~8 mm of the origin."""
    return geometry.SystemConfig(
        aperture_radius=30.0,
        polar_start=90.25,
        polar_end=170.25,
        n_elements=3,
        n_views=6,
        n_samples=512,
        dt=0.05,
        sos=1.5,
        elem_a=1.2,
        elem_b=6.0,
    )


@pytest.fixture(scope="session")
def tiny_array(tiny_config) -> list[geometry.TransducerPose]:
    return geometry.build_array(tiny_config)


@pytest.fixture(scope="session")
def tiny_spheres() -> list[forward.Sphere]:
    return [
        forward.Sphere(center=(3.0, 2.0, -4.0), radius=1.0, amplitude=1.0),
        forward.Sphere(center=(-4.0, 1.0, -6.0), radius=0.6, amplitude=0.5),
    ]


@pytest.fixture(scope="session")
def tiny_point_sim(tiny_spheres, tiny_config) -> forward.PressureTensor:
    return forward.simulate(tiny_spheres, tiny_config, "point")


@pytest.fixture(scope="session")
def tiny_rect_sim(tiny_spheres, tiny_config) -> forward.PressureTensor:
    return forward.simulate(tiny_spheres, tiny_config, "rect")


@pytest.fixture(scope="session")
def desk_cfg() -> geometry.SystemConfig:
    return geometry.desk_config()


def rel_l2(a: np.ndarray, b: np.ndarray) -> float:
    """Relative L2 distance of a from reference b."""
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / np.linalg.norm(b))
