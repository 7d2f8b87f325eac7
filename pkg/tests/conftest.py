import numpy as np
import pytest

from app.models import SinusoidTerm
from app.services.grid import Image2D
from app.services.synth import noise_generator


@pytest.fixture
def rng():
    return noise_generator(1234)


@pytest.fixture
def cosine_image():
    """Single undamped 2D cosine, HbH rank 2"""
    n = np.arange(20, dtype=np.float64)[:, None]
    m = np.arange(24, dtype=np.float64)[None, :]
    return Image2D(values=np.cos(2 * np.pi * (0.12 * n + 0.07 * m) + 0.3))


@pytest.fixture
def two_terms():
    return (
        SinusoidTerm(s=1.0, rho_r=0.98, om_r=0.1, om_c=0.2, phi=0.4),
        SinusoidTerm(s=0.6, rho_c=1.01, om_r=0.3, om_c=-0.15, phi=-1.1),
    )


def _misalignment(first: np.ndarray, second: np.ndarray, margin: int = 10, search: float = 5.0) -> float:
    """Sub-pixel d with second(x) ~ first(x + d), by best match over a 0.01 px grid"""
    x = np.arange(first.size, dtype=np.float64)
    inner = x[margin:-margin]
    candidates = np.arange(-search, search + 1e-9, 0.01)
    errors = [np.mean((np.interp(inner + d, x, first) - second[margin:-margin]) ** 2) for d in candidates]
    return float(candidates[int(np.argmin(errors))])


@pytest.fixture
def misalignment():
    return _misalignment
