import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stereo_unsup.synth import SceneSpec, generate_scene

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("repo")

# filled by tests/test_acceptance.py, printed once at the end of the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def scene64():
    return generate_scene(SceneSpec(seed=11, height=64, width=64, max_disp=8.0))


@pytest.fixture(scope="session")
def scene128():
    return generate_scene(SceneSpec(seed=5))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def smooth_texture(rng, h, w, sigma=1.0, channels=1):
    from scipy.ndimage import gaussian_filter

    t = gaussian_filter(rng.random((h, w, channels)), (sigma, sigma, 0))
    t = (t - t.min()) / (t.max() - t.min())
    return 0.1 + 0.8 * t


def shifted_pair(rng, h, w, k, sigma=1.0):
    """Left/right pair where left(r, c) = right(r, c - k) for c >= k."""
    base = smooth_texture(rng, h, w + k, sigma)
    right = base[:, k:]
    left = base[:, :w]
    return left, right
