import numpy as np
import pytest

from planefinder.transforms import RigidTransform, normalize_quat


def random_quat(rng: np.random.Generator) -> np.ndarray:
    return normalize_quat(rng.normal(size=4))


def random_transform(rng: np.random.Generator, box: float = 20.0) -> RigidTransform:
    return RigidTransform(rng.uniform(-box, box, size=3), random_quat(rng))


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
