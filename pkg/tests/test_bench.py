import pytest

from app.services import bench
from app.services.bench import N_LOG_N_RATIO, best_of, bench_image, matvec_seconds, run_bench


def test_best_of_runs_every_repeat():
    calls = []
    seconds = best_of(lambda: calls.append(1), 4)
    assert len(calls) == 4
    assert seconds >= 0.0


def test_bench_image_is_square():
    assert bench_image(24).dims == (24, 24)


def test_matvec_timing_is_positive():
    assert matvec_seconds(16, repeats=2, batch=3) > 0.0
    assert matvec_seconds(16, repeats=2) > 0.0


def test_small_sweep_report():
    report = run_bench([16, 24], k=3, diff_terms=(5,), diff_dims=(40, 10))
    assert [row.size for row in report.rows] == [16, 24]
    assert len(report.ratios) == 1
    assert all(row.peak_mib > 0 for row in report.rows)
    assert [row.n_terms for row in report.differentiation] == [5]
    assert "subquadratic" in report.to_text()


def test_sweep_reports_product_growth():
    report = run_bench([16, 24], k=3, diff_terms=(), diff_dims=(40, 10))
    assert all(row.matvec_seconds > 0 for row in report.rows)
    assert len(report.matvec_ratios) == 1
    assert report.n_log_n == (report.matvec_ratios[0] < N_LOG_N_RATIO)
    assert "n_log_n" in report.to_text()


@pytest.mark.parametrize("power, expected", [(2, True), (3, False)])
def test_product_growth_verdict(monkeypatch, power, expected):
    monkeypatch.setattr(bench, "matvec_seconds", lambda size, **_: 1e-6 * size ** power)
    report = run_bench([16, 32, 64], k=3, diff_terms=(), diff_dims=(40, 10))
    assert report.matvec_ratios == pytest.approx([2.0 ** power] * 2)
    assert report.n_log_n is expected
    assert f"n_log_n: {expected}" in report.to_text()
