import logging
import math
from typing import Sequence, Tuple

import numpy as np
from numpy.polynomial import polynomial
from pydantic import BaseModel, ConfigDict

from app.errors import InvalidInputError
from app.models import Axis, ElSynthSpec, ParametricModel2D, SinusoidTerm
from app.services.grid import Image2D, Series1D
from app.services.sigmodel import evaluate, evaluate_grid

logger = logging.getLogger(__name__)


def noise_generator(seed: int) -> np.random.Generator:
    """Counter-based (Philox) stream; normals come from numpy's ziggurat transform"""
    return np.random.Generator(np.random.Philox(seed))


class ElGroundTruth(BaseModel):
    """Separately generated parts of a synthetic EL image"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    trend: Image2D
    cell: Image2D
    defects: Image2D
    noise: Image2D
    cell_model: ParametricModel2D

    def total(self) -> np.ndarray:
        return self.trend.values + self.cell.values + self.defects.values + self.noise.values


def gen_cosine2d(term: SinusoidTerm, dims: Tuple[int, int]) -> Image2D:
    return evaluate_grid(ParametricModel2D(terms=(term,)), dims)


def cell_pattern_model(
    cell_period: float,
    cell_axis: Axis,
    amplitude: float,
    harmonics: Sequence[float],
    phases: Sequence[float],
) -> ParametricModel2D:
    """Harmonics of the cell frequency along ``cell_axis`` as a parametric model"""
    terms = []
    for order, (weight, phase) in enumerate(zip(harmonics, phases), start=1):
        frequency = order / cell_period
        if frequency > 0.5:
            raise InvalidInputError(
                f"harmonic {order} of period {cell_period:g} exceeds the Nyquist frequency"
            )
        along = {"om_r": frequency} if cell_axis is Axis.ROW else {"om_c": frequency}
        terms.append(SinusoidTerm(s=amplitude * weight, phi=phase, **along))
    return ParametricModel2D(terms=tuple(terms))


def _trend(spec: ElSynthSpec) -> np.ndarray:
    n_x, n_y = spec.dims
    n = np.arange(n_x, dtype=np.float64)[:, None]
    m = np.arange(n_y, dtype=np.float64)[None, :]
    trend = spec.offset + evaluate(ParametricModel2D(terms=spec.trend_terms), n, m)
    if spec.trend_poly:
        # coefficients c[i][j] of u**i * v**j on the unit square
        u = n[:, 0] / max(n_x - 1, 1)
        v = m[0, :] / max(n_y - 1, 1)
        trend = trend + polynomial.polygrid2d(u, v, np.array(spec.trend_poly, dtype=np.float64))
    return np.broadcast_to(trend, spec.dims).copy()


def _defects(spec: ElSynthSpec) -> np.ndarray:
    n = np.arange(spec.dims[0], dtype=np.float64)[:, None]
    m = np.arange(spec.dims[1], dtype=np.float64)[None, :]
    blobs = np.zeros(spec.dims)
    for defect in spec.defects:
        distance_sq = (n - defect.center[0]) ** 2 + (m - defect.center[1]) ** 2
        blobs -= defect.depth * np.exp(-distance_sq / (2 * defect.radius ** 2))
    return blobs


def gen_el_like(spec: ElSynthSpec) -> Tuple[Image2D, ElGroundTruth]:
    """
    Synthetic EL-like image: smooth trend + cell stripes + dark defect blobs + noise

    Args:
        spec: generator recipe; the cell stripes are 3 harmonics of 1/cell_period
              along the cell axis

    Returns:
        The image and its ground-truth parts, which sum to it bit for bit
    """
    cell_model = cell_pattern_model(
        spec.cell_period, spec.cell_axis, spec.cell_amplitude, spec.harmonics, spec.harmonic_phases
    )
    trend = Image2D(values=_trend(spec))
    cell = evaluate_grid(cell_model, spec.dims)
    defects = Image2D(values=_defects(spec))
    noise = Image2D(values=spec.noise_sigma * noise_generator(spec.seed).standard_normal(spec.dims))
    truth = ElGroundTruth(trend=trend, cell=cell, defects=defects, noise=noise, cell_model=cell_model)

    logger.debug(f"Generated EL-like image {spec.dims} with {spec.n_cells} cells (seed {spec.seed})")
    return Image2D(values=truth.total()), truth


def gen_s1_s2(shift: float, n: int = 1000, seed: int = 0, noise_sigma: float = 1.0) -> Tuple[Series1D, Series1D]:
    """
    Two noisy series whose periods 20 and 30 differ by ``shift`` samples

    s1(x) = cos(2 pi x/50) + cos(2 pi x/20) + cos(2 pi x/30) + e1
    s2(x) = 2 cos(2 pi x/70) + cos(2 pi (x + shift)/20) + cos(2 pi (x + shift)/30) + e2
    with x = 1..n and e1, e2 independent standard normal (scaled by noise_sigma).
    """
    if n < 100:
        raise InvalidInputError(f"n must be at least 100, got {n}")
    x = np.arange(1, n + 1, dtype=np.float64)
    e1, e2 = noise_sigma * noise_generator(seed).standard_normal((2, n))
    s1 = np.cos(2 * np.pi * x / 50) + np.cos(2 * np.pi * x / 20) + np.cos(2 * np.pi * x / 30) + e1
    s2 = (
        2 * np.cos(2 * np.pi * x / 70)
        + np.cos(2 * np.pi * (x + shift) / 20)
        + np.cos(2 * np.pi * (x + shift) / 30)
        + e2
    )
    return Series1D(values=s1), Series1D(values=s2)


def charlen_voltage(lambda0: float, cell_width: int, n_cells: int, v_edge: float) -> np.ndarray:
    """Per-cell V(x) = V_edge cosh(lambda0 (x - x_c)) / cosh(lambda0 w / 2)"""
    if not lambda0 > 0:
        raise InvalidInputError(f"lambda0 must be positive, got {lambda0}")
    if cell_width < 2 or n_cells < 1:
        raise InvalidInputError(f"need cell_width >= 2 and n_cells >= 1, got {cell_width}, {n_cells}")
    x = np.arange(cell_width * n_cells, dtype=np.float64)
    centers = (x // cell_width) * cell_width + (cell_width - 1) / 2
    return v_edge * np.cosh(lambda0 * (x - centers)) / math.cosh(lambda0 * cell_width / 2)


def gen_charlen_profile(
    lambda0: float,
    cell_width: int,
    n_cells: int,
    c: float,
    c0: float,
    v_edge: float,
    n_rows: int = 8,
) -> Image2D:
    """I = c exp(c0 V) of the cosh voltage profile along columns, repeated over ``n_rows`` rows"""
    if n_rows < 1:
        raise InvalidInputError(f"n_rows must be positive, got {n_rows}")
    intensity = c * np.exp(c0 * charlen_voltage(lambda0, cell_width, n_cells, v_edge))
    return Image2D(values=np.tile(intensity, (n_rows, 1)))


def gen_stitched_cells(
    dims: Tuple[int, int],
    cell_period: float,
    offsets: Sequence[float],
    harmonics: Sequence[float] = (1.0, 0.3, 0.1),
    phases: Sequence[float] = (0.0, 0.8, 1.6),
    offset: float = 1.0,
) -> Image2D:
    """Rows of a cell pattern along columns, row i sampled at x + offsets[i] (analytic)"""
    if len(offsets) != dims[0]:
        raise InvalidInputError(f"{len(offsets)} offsets for {dims[0]} rows")
    model = cell_pattern_model(cell_period, Axis.COL, 1.0, harmonics, phases)
    n = np.zeros((dims[0], 1))
    m = np.arange(dims[1], dtype=np.float64)[None, :] + np.asarray(offsets, dtype=np.float64)[:, None]
    return Image2D(values=offset + evaluate(model, n, m))
