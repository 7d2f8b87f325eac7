import numpy as np
import pytest
from pydantic import ValidationError

from app.errors import InvalidInputError
from app.models import Axis, Defect, ElSynthSpec, SinusoidTerm
from app.services.synth import (
    cell_pattern_model,
    charlen_voltage,
    gen_charlen_profile,
    gen_cosine2d,
    gen_el_like,
    gen_s1_s2,
    gen_stitched_cells,
    noise_generator,
)


def _spec(**overrides) -> ElSynthSpec:
    fields = dict(dims=(60, 40), n_cells=5, cell_period=12.0, noise_sigma=0.05, seed=4)
    fields.update(overrides)
    return ElSynthSpec(**fields)


def test_parts_sum_to_image_exactly():
    spec = _spec(
        trend_terms=(SinusoidTerm(s=0.2, rho_r=0.99, om_r=0.01),),
        trend_poly=((0.0, 0.1), (0.3, 0.0)),
        defects=(Defect(center=(20.0, 10.0), radius=3.0, depth=0.4),),
    )
    image, truth = gen_el_like(spec)
    assert np.array_equal(image.values, truth.total())
    assert truth.defects.values.min() == pytest.approx(-0.4, abs=1e-3)
    assert len(truth.cell_model) == 3


def test_same_seed_same_image():
    first, _ = gen_el_like(_spec())
    second, _ = gen_el_like(_spec())
    third, _ = gen_el_like(_spec(seed=5))
    assert np.array_equal(first.values, second.values)
    assert not np.array_equal(first.values, third.values)


def test_cells_run_along_the_chosen_axis():
    _, truth = gen_el_like(_spec(dims=(30, 60), cell_axis=Axis.COL, noise_sigma=0.0))
    cell = truth.cell.values
    assert np.allclose(cell, cell[:1, :])
    assert all(term.om_r == 0.0 and term.om_c > 0 for term in truth.cell_model.terms)


def test_cell_layout_must_fit_the_image():
    with pytest.raises(ValidationError):
        _spec(n_cells=10)
    with pytest.raises(InvalidInputError):
        cell_pattern_model(3.0, Axis.ROW, 1.0, (1.0, 1.0), (0.0, 0.0))


def test_cosine_generator():
    img = gen_cosine2d(SinusoidTerm(s=2.0, om_c=0.25), (2, 4))
    assert np.allclose(img.values, [[2.0, 0.0, -2.0, 0.0]] * 2, atol=1e-12)


def test_s1_s2_structure():
    a, b = gen_s1_s2(7.0, n=200, seed=0, noise_sigma=0.0)
    x = np.arange(1, 201, dtype=np.float64)
    assert a.length == b.length == 200
    assert np.allclose(b.values - 2 * np.cos(2 * np.pi * x / 70), np.cos(2 * np.pi * (x + 7) / 20) + np.cos(2 * np.pi * (x + 7) / 30))
    noisy, _ = gen_s1_s2(7.0, n=200, seed=0)
    assert np.std(noisy.values - a.values) == pytest.approx(1.0, rel=0.2)
    with pytest.raises(InvalidInputError):
        gen_s1_s2(7.0, n=50)


def test_noise_stream_is_reproducible():
    assert np.array_equal(noise_generator(9).standard_normal(5), noise_generator(9).standard_normal(5))


def test_charlen_profile_edges():
    voltage = charlen_voltage(0.05, 40, 3, 0.6)
    assert voltage.size == 120
    # v_edge is reached half a pixel beyond each cell end
    assert np.allclose(voltage[:40], voltage[39::-1])
    assert voltage[0] == pytest.approx(0.6 * np.cosh(0.05 * 19.5) / np.cosh(1.0))
    image = gen_charlen_profile(0.05, 40, 3, c=2.0, c0=30.0, v_edge=0.6, n_rows=4)
    assert image.dims == (4, 120)
    assert np.allclose(np.log(image.values[0] / 2.0) / 30.0, voltage)
    with pytest.raises(InvalidInputError):
        charlen_voltage(0.0, 40, 3, 0.6)


def test_stitched_rows_are_shifted_copies():
    offsets = [0.0, 0.0, 2.5]
    img = gen_stitched_cells((3, 80), 20.0, offsets, harmonics=(1.0,), phases=(0.0,))
    x = np.arange(80, dtype=np.float64)
    assert np.allclose(img.values[2], 1.0 + np.cos(2 * np.pi * (x + 2.5) / 20))
    assert np.array_equal(img.values[0], img.values[1])
    with pytest.raises(InvalidInputError):
        gen_stitched_cells((3, 80), 20.0, [0.0])


def test_polynomial_trend_on_unit_square():
    _, truth = gen_el_like(_spec(trend_poly=((0.0, 0.1), (0.3, 0.0)), noise_sigma=0.0))
    u = np.arange(60)[:, None] / 59
    v = np.arange(40)[None, :] / 39
    assert truth.trend.dims == (60, 40)
    assert np.allclose(truth.trend.values, truth.trend.values[0, 0] + 0.3 * u + 0.1 * v, atol=1e-12)
