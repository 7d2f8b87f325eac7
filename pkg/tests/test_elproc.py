import math

import numpy as np
import pytest

from app.errors import InvalidInputError, NumericalError
from app.models import Aggregate, Axis, DecompositionMode, ElSynthSpec, ParametricModel2D, SinusoidTerm
from app.services.elproc import (
    DisplacementMap,
    apply_displacement,
    cell_char_length,
    char_length,
    detect_lines,
    el_decompose,
    estimate_pair_shift,
    shift_accuracy,
    stitch_displacement,
    thermal_c0,
    voltage_curvature,
    voltage_field,
)
from app.services.grid import Image2D
from app.services.sigmodel import evaluate
from app.services.synth import (
    cell_pattern_model,
    gen_charlen_profile,
    gen_el_like,
    gen_s1_s2,
    gen_stitched_cells,
    noise_generator,
)


def _el_spec(seed: int = 0, noise: float = 0.0) -> ElSynthSpec:
    return ElSynthSpec(
        dims=(64, 48),
        n_cells=5,
        cell_period=12.0,
        trend_terms=(SinusoidTerm(s=0.3, rho_r=0.99, om_r=0.01, phi=0.5),),
        noise_sigma=noise,
        seed=seed,
    )


def _correlation(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.corrcoef(a.ravel(), b.ravel())[0, 1])


def test_decomposition_is_exact_and_separates_cells():
    image, truth = gen_el_like(_el_spec())
    result = el_decompose(image, n_cells=5, k=24)
    assert np.allclose(result.G.values + result.S.values + result.R.values, image.values, rtol=0, atol=1e-12)
    assert result.threshold == pytest.approx(5 / 64)
    assert len(result.model_S) == 3
    assert _correlation(result.S.values, truth.cell.values) > 0.99
    assert _correlation(result.G.values, truth.trend.values) > 0.99
    assert np.max(np.abs(result.R.values)) < 1e-6


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_separation_with_noise(seed):
    image, truth = gen_el_like(_el_spec(seed, noise=0.01))
    result = el_decompose(image, n_cells=5, k=12, seed=seed)
    assert np.allclose(result.G.values + result.S.values + result.R.values, image.values, atol=1e-12)
    assert _correlation(result.S.values, truth.cell.values) > 0.99
    assert _correlation(result.G.values, truth.trend.values) > 0.99


def test_multiplicative_mode_works_in_log_domain():
    image, _ = gen_el_like(_el_spec().model_copy(update={"trend_terms": ()}))
    result = el_decompose(image, n_cells=5, k=24, mode=DecompositionMode.MULTIPLICATIVE)
    assert result.mode is DecompositionMode.MULTIPLICATIVE
    total = result.G.values + result.S.values + result.R.values
    assert np.allclose(total, np.log(image.values), atol=1e-12)


def test_zero_image_goes_to_remainder():
    result = el_decompose(Image2D.zeros((8, 8)), n_cells=2, k=3)
    assert len(result.model) == 0
    assert not np.any(result.R.values)


def test_lines_are_sub_pixel_minima():
    model = cell_pattern_model(20.0, Axis.ROW, 1.0, (1.0,), (0.7,))
    lines = detect_lines(model, (100, 30), refine=4)
    first = (math.pi - 0.7) * 20 / (2 * math.pi)
    expected = first + 20 * np.arange(5)
    assert len(lines.lines) == 5
    for line, want in zip(sorted(lines.lines, key=lambda l: l[0][0]), expected):
        assert len(line) == 30
        assert all(abs(row - want) <= 1e-3 for row, _ in line)
    records = lines.records()
    assert records[0][0] == 0 and records[0][1] == 0.0


def test_lines_along_columns():
    model = cell_pattern_model(16.0, Axis.COL, 1.0, (1.0, 0.3), (0.0, 0.8))
    lines = detect_lines(model, (10, 64), cell_axis=Axis.COL)
    grid = np.arange(0, 63 + 1e-9, 1e-4)
    profile = np.zeros_like(grid)
    for order, (weight, phase) in enumerate([(1.0, 0.0), (0.3, 0.8)], start=1):
        profile += weight * np.cos(2 * np.pi * order * grid / 16.0 + phase)
    interior = (profile[1:-1] < profile[:-2]) & (profile[1:-1] <= profile[2:])
    oracle = grid[1:-1][interior]
    assert len(lines.lines) == len(oracle)
    for line, want in zip(sorted(lines.lines, key=lambda l: l[0][1]), oracle):
        assert all(abs(col - want) <= 1e-3 for _, col in line)


def test_line_detection_needs_a_model():
    with pytest.raises(InvalidInputError):
        detect_lines(ParametricModel2D(), (10, 10))


def test_thermal_voltage_constant():
    assert thermal_c0(300.0) == pytest.approx(38.68, rel=1e-3)
    with pytest.raises(InvalidInputError):
        thermal_c0(0.0)


def test_char_length_recovers_lambda_in_log_domain():
    lambda0 = 0.02
    image = gen_charlen_profile(lambda0, 200, 1, c=1.0, c0=38.6, v_edge=0.6, n_rows=8)
    result = el_decompose(image, n_cells=1, cell_axis=Axis.COL, k=6, mode=DecompositionMode.MULTIPLICATIVE)
    field = char_length(result.model, image.dims, c=1.0, c0=38.6, direction=Axis.COL, log_domain=True)
    assert np.nanmedian(field.lambda_values()) == pytest.approx(lambda0, rel=0.01)


def test_voltage_curvature_matches_finite_differences():
    model = ParametricModel2D(
        terms=(SinusoidTerm(s=3.0), SinusoidTerm(s=0.5, rho_c=0.99, om_c=0.03, phi=0.2))
    )
    dims, c0, h = (4, 50), 38.0, 1e-3
    n = np.arange(dims[0], dtype=np.float64)[:, None]
    m = np.arange(dims[1], dtype=np.float64)[None, :]

    def voltage(offset):
        return np.log(evaluate(model, n, m + offset)) / c0

    second = (voltage(h) - 2 * voltage(0.0) + voltage(-h)) / h ** 2
    field = char_length(model, dims, c=1.0, c0=c0)
    assert np.allclose(voltage_field(model, dims, c=1.0, c0=c0).values, voltage(0.0), rtol=1e-12)
    assert np.allclose(voltage_curvature(model, dims, c0=c0).values, second, rtol=1e-6, atol=1e-9)
    lambda_sq = second / voltage(0.0)
    assert np.allclose(field.lambda_sq.values[field.mask], lambda_sq[field.mask], rtol=1e-6, atol=1e-9)


def test_char_length_per_cell_on_tiled_profile():
    lambda0 = 0.05
    image = gen_charlen_profile(lambda0, 40, 4, c=1.0, c0=38.6, v_edge=0.6, n_rows=8)
    field = cell_char_length(image, 4, c=1.0, c0=38.6, direction=Axis.COL)
    assert field.mask.all()
    assert np.nanmedian(field.lambda_values()) == pytest.approx(lambda0, rel=0.01)
    for start in range(0, 160, 40):
        cell = field.lambda_values()[:, start:start + 40]
        assert np.nanmedian(cell) == pytest.approx(lambda0, rel=0.01)


def test_char_length_per_cell_with_noise():
    lambda0 = 0.05
    image = gen_charlen_profile(lambda0, 40, 4, c=1.0, c0=38.6, v_edge=0.6, n_rows=8)
    noisy = Image2D(values=image.values * (1.0 + 0.01 * noise_generator(11).standard_normal(image.dims)))
    field = cell_char_length(noisy, 4, c=1.0, c0=38.6)
    assert np.nanmedian(field.lambda_values()) == pytest.approx(lambda0, rel=0.05)


def test_char_length_per_cell_additive():
    lambda0 = 0.05
    image = gen_charlen_profile(lambda0, 40, 4, c=1.0, c0=0.5, v_edge=0.6, n_rows=8)
    field = cell_char_length(image, 4, c=1.0, c0=0.5, mode=DecompositionMode.ADDITIVE, k=12)
    assert np.nanmedian(field.lambda_values()) == pytest.approx(lambda0, rel=0.05)


def test_char_length_per_cell_needs_wide_strips():
    image = gen_charlen_profile(0.05, 6, 2, c=1.0, c0=38.6, v_edge=0.6)
    with pytest.raises(InvalidInputError):
        cell_char_length(image, 4, c=1.0, c0=38.6)


def test_char_length_masks_flat_intensity():
    model = ParametricModel2D(terms=(SinusoidTerm(s=1.0),))
    with pytest.raises(NumericalError):
        char_length(model, (3, 3), c=1.0, c0=38.0)
    with pytest.raises(InvalidInputError):
        char_length(model, (3, 3), c=-1.0, c0=38.0)


def test_pair_shift_on_clean_series():
    a, b = gen_s1_s2(7.0, n=400, seed=0, noise_sigma=0.0)
    result = estimate_pair_shift(a, b, (0.025, 0.075))
    assert not result.flagged
    assert sorted(round(om, 4) for om, _ in result.components) == [0.0333, 0.05]
    assert all(shift == pytest.approx(7.0, abs=1e-6) for _, shift in result.components)


def test_pair_without_in_band_component_is_flagged():
    a, b = gen_s1_s2(7.0, n=400, seed=0, noise_sigma=0.0)
    assert estimate_pair_shift(a, b, (0.3, 0.4)).flagged


def _stitched(shift_row: int = 6, shift: float = 3.5) -> Image2D:
    offsets = [0.0 if i < shift_row else shift for i in range(12)]
    return gen_stitched_cells((12, 120), 20.0, offsets)


def test_stitch_round_trip(misalignment):
    image = _stitched()
    displacement = stitch_displacement(image, Axis.ROW, cell_band=(0.03, 0.07))
    assert displacement.shifts[5] == pytest.approx(3.5, abs=0.1)
    assert all(abs(s) < 0.1 for i, s in enumerate(displacement.shifts) if i != 5)
    assert not displacement.flagged

    corrected = apply_displacement(image, -displacement)
    assert abs(misalignment(corrected.values[5], corrected.values[6])) < 0.2
    assert abs(misalignment(image.values[5], image.values[6]) - 3.5) < 0.05


def test_stitch_threads_agree():
    image = _stitched()
    serial = stitch_displacement(image, Axis.ROW, cell_band=(0.03, 0.07), threads=1)
    parallel = stitch_displacement(image, Axis.ROW, cell_band=(0.03, 0.07), threads=3)
    assert serial.shifts == parallel.shifts


def test_stitch_along_columns_and_row_range():
    image = Image2D(values=_stitched().values.T)
    displacement = stitch_displacement(image, Axis.COL, cell_band=(0.03, 0.07), rows=(4, 9))
    assert displacement.axis is Axis.COL
    assert displacement.shifts[5] == pytest.approx(3.5, abs=0.1)
    assert displacement.shifts[0] == 0.0 and displacement.shifts[10] == 0.0


def test_stitch_input_checks():
    image = _stitched()
    with pytest.raises(InvalidInputError):
        stitch_displacement(image, cell_band=(0.2, 0.1))
    with pytest.raises(InvalidInputError):
        stitch_displacement(image, cell_band=(0.03, 0.07), rows=(5, 20))


def test_apply_displacement_moves_slices():
    x = np.arange(10, dtype=np.float64)
    image = Image2D(values=np.vstack([x, x]))
    moved = apply_displacement(image, DisplacementMap(shifts=(2.0,)))
    assert np.array_equal(moved.values[0], x)
    assert np.allclose(moved.values[1, :8], x[2:])
    assert moved.values[1, 9] == 9.0
    with pytest.raises(InvalidInputError):
        apply_displacement(image, DisplacementMap(shifts=(1.0, 2.0)))


def test_shift_accuracy_report():
    report = shift_accuracy(repeats=3, aggregate=Aggregate.MEDIAN)
    assert report.repeats == 3 and len(report.estimates) == 3
    assert report.q25 <= report.q75
    assert abs(report.mean - 7.0) < 1.0
    with pytest.raises(InvalidInputError):
        shift_accuracy(repeats=0)


@pytest.mark.parametrize("size", [6, 10])
def test_small_images_keep_the_subspace_solvable(size):
    noise = noise_generator(size).standard_normal((size, size))
    image = Image2D(values=1.0 + 0.1 * noise)
    result = el_decompose(image, n_cells=2)
    w = result.window
    assert result.rank <= min((w.l_x - 1) * w.l_y, w.l_x * (w.l_y - 1))
    assert np.allclose(result.G.values + result.S.values + result.R.values, image.values, rtol=0, atol=1e-12)


def test_pair_shift_aggregation_rules():
    a, b = gen_s1_s2(7.0, n=400, seed=3, noise_sigma=0.2)
    largest = estimate_pair_shift(a, b, (0.025, 0.075))
    middle = estimate_pair_shift(a, b, (0.025, 0.075), aggregate=Aggregate.MEDIAN)
    shifts = [shift for _, shift in largest.components]
    assert largest.shift == max(shifts)
    assert middle.shift == pytest.approx(float(np.median(shifts)))
    assert shift_accuracy(repeats=2).estimates == shift_accuracy(repeats=2, aggregate=Aggregate.MEDIAN).estimates
