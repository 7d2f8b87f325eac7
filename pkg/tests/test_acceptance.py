import numpy as np
import pytest

from app.models import ElSynthSpec, SinusoidTerm
from app.services.bench import N_LOG_N_RATIO, best_of, bench_image, matvec_seconds
from app.services.elproc import el_decompose, shift_accuracy
from app.services.ssa2d import decompose_2d
from app.services.synth import gen_el_like

pytestmark = pytest.mark.slow


def test_shift_estimation_accuracy_over_100_seeds():
    report = shift_accuracy(shift=7.0, n=1000, repeats=100)
    assert 6.90 <= report.mean <= 7.10
    assert 0.15 <= report.rmse <= 0.40
    assert report.q25 <= 7.0 <= report.q75


@pytest.mark.parametrize("seed", range(20))
def test_synthetic_el_suite(seed):
    spec = ElSynthSpec(
        dims=(64, 48),
        n_cells=5,
        cell_period=12.0,
        trend_terms=(SinusoidTerm(s=0.3, rho_r=0.99, om_r=0.01, phi=0.5),),
        noise_sigma=0.01,
        seed=seed,
    )
    image, truth = gen_el_like(spec)
    result = el_decompose(image, n_cells=5, k=12, seed=seed)
    assert np.corrcoef(result.S.values.ravel(), truth.cell.values.ravel())[0, 1] > 0.99
    assert np.corrcoef(result.G.values.ravel(), truth.trend.values.ravel())[0, 1] > 0.99
    # residual stays at the noise level
    assert np.sqrt(np.mean(result.R.values ** 2)) < 0.1


def test_matvec_scales_like_n_log_n():
    small = matvec_seconds(1000, repeats=5, batch=3)
    large = matvec_seconds(2000, repeats=5, batch=3)
    assert large / small < N_LOG_N_RATIO


def test_decompose_is_subquadratic():
    small, large = bench_image(128), bench_image(256)
    fast = best_of(lambda: decompose_2d(small, k=10), 3)
    slow = best_of(lambda: decompose_2d(large, k=10), 3)
    assert slow / fast < 16.0
