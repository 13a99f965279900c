import numpy as np
import pytest

from ript import geometry, synth
from ript.geometry import OrientedPointSet


def random_set(n, rng, label=None):
    """Non-degenerate random oriented set: a jittered ellipsoid with radial normals."""
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    axes = np.array([1.0, 0.7, 0.45]) * rng.uniform(0.8, 1.2, 3)
    pts = d * axes * rng.uniform(0.9, 1.1, (n, 1))
    normals = d / axes**2
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return geometry.normalize_pose(OrientedPointSet(pts, normals, label))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def blob(rng):
    return random_set(256, rng)


@pytest.fixture
def shapes():
    rng = np.random.default_rng(7)
    return [geometry.normalize_pose(synth.sample_shape(c, 128, rng)) for c in ("sphere", "box", "cone", "torus")]


# one summary line per acceptance criterion, printed at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
