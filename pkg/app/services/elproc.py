"""EL image applications of 2D-SSA.

- ``el_decompose``: split an image into global intensity G, cell pattern S and remainder R
- ``detect_lines``: interconnection lines as sub-pixel minima of the cell model
- ``char_length`` / ``cell_char_length``: inverse characteristic length from the smooth intensity model
- ``stitch_displacement`` / ``apply_displacement``: per-slice shift correction
"""
import asyncio
import logging
import math
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.config import settings
from app.errors import InvalidInputError, NumericalError
from app.models import (
    Aggregate,
    Axis,
    ComponentDescriptor,
    DecompositionMode,
    EmbeddingWindow,
    LineSet,
    ParametricModel2D,
    PoleEstimate,
    ShiftAccuracyReport,
    wrap_phase,
)
from app.services.esprit import esprit_1d, esprit_2d, max_components, merge_conjugates, select_rank
from app.services.grid import Image2D, Series1D, log_transform
from app.services.sigmodel import differentiate, evaluate, evaluate_grid, fit_amplitude_phase, partition_terms
from app.services.ssa2d import Channel, channel_model, decompose_2d, decompose_mssa, reconstruct
from app.services.synth import gen_s1_s2

logger = logging.getLogger(__name__)

ELEMENTARY_CHARGE = 1.602176634e-19
BOLTZMANN = 1.380649e-23
BISECTION_XTOL = 1e-3
LEVEL_CHUNK = 256
CELL_RANK = 3


class ElDecomposition(BaseModel):
    """X = G + S + R; in multiplicative mode all three live in the log domain"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    G: Image2D
    S: Image2D
    R: Image2D
    model_S: ParametricModel2D
    model_G: ParametricModel2D
    mode: DecompositionMode = DecompositionMode.ADDITIVE
    window: Optional[EmbeddingWindow] = None
    n_triples: int = 0
    rank: int = 0
    threshold: float = 0.0
    energy_fractions: Tuple[float, ...] = ()

    @property
    def model(self) -> ParametricModel2D:
        """G and S terms together, with the regression rmse"""
        return ParametricModel2D(
            terms=self.model_G.terms + self.model_S.terms, fit_rmse=self.model_S.fit_rmse
        )


class CharLengthField(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    lambda_sq: Image2D
    mask: np.ndarray
    voltage: Image2D

    def lambda_values(self) -> np.ndarray:
        """sqrt(lambda^2) where valid and nonnegative, NaN elsewhere"""
        valid = self.mask & (self.lambda_sq.values >= 0)
        return np.where(valid, np.sqrt(np.where(valid, self.lambda_sq.values, 0.0)), np.nan)


class PairShift(BaseModel):
    """Shift between two adjacent slices, with the per-component estimates behind it"""
    shift: float = 0.0
    components: List[Tuple[float, float]] = Field(default_factory=list)
    flagged: bool = False


class DisplacementMap(BaseModel):
    """Relative shift of slice i against slice i-1, for i = 1..N-1"""
    model_config = ConfigDict(frozen=True)

    shifts: Tuple[float, ...]
    axis: Axis = Axis.ROW
    flagged: Tuple[int, ...] = ()

    def __neg__(self) -> "DisplacementMap":
        return DisplacementMap(shifts=tuple(-s for s in self.shifts), axis=self.axis, flagged=self.flagged)

    def absolute(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.shifts)])


def _zero_decomposition(img: Image2D, mode: DecompositionMode, window) -> ElDecomposition:
    zeros = Image2D.zeros(img.dims)
    return ElDecomposition(
        G=zeros, S=zeros, R=img, model_S=ParametricModel2D(), model_G=ParametricModel2D(),
        mode=mode, window=window,
    )


def image_poles(basis: np.ndarray, w: EmbeddingWindow) -> List[PoleEstimate]:
    if w.l_x >= 2 and w.l_y >= 2:
        return esprit_2d(basis, w)
    if w.l_y == 1:
        return esprit_1d(basis)
    # single-row window: the basis runs along columns
    return [PoleEstimate(z_r=1.0 + 0.0j, z_c=pole.z_r) for pole in esprit_1d(basis)]


def el_decompose(
    X: Image2D,
    n_cells: int = None,
    cell_axis: Axis = Axis.ROW,
    k: int = None,
    mode: DecompositionMode = DecompositionMode.ADDITIVE,
    window: Optional[EmbeddingWindow] = None,
    floor: float = None,
    seed: int = None,
) -> ElDecomposition:
    """
    Global/cell/aperiodic decomposition of an EL image

    Steps:
    1. 2D-SSA with k triples (half-size window unless given)
    2. ESPRIT on the leading triples, conjugate poles merged into real components
    3. Amplitude/phase least squares on the reconstruction of those triples
    4. Terms oscillating faster than n_cells/N along the cell axis form S, the rest G
    5. R = X - S - G
    """
    n_cells = settings.n_cells if n_cells is None else n_cells
    k = settings.default_k if k is None else k
    floor = settings.log_floor if floor is None else floor
    if n_cells < 1:
        raise InvalidInputError(f"n_cells must be positive, got {n_cells}")

    work = log_transform(X, floor) if mode is DecompositionMode.MULTIPLICATIVE else X
    w = EmbeddingWindow.half(work.dims) if window is None else window
    if not np.any(work.values):
        logger.info("Zero image, nothing to decompose")
        return _zero_decomposition(work, mode, w)

    logger.info(f"🚀 Decomposing {X.rows}x{X.cols} image ({mode.value}, {n_cells} cells along {cell_axis.value})")
    ssa = decompose_2d(work, w, k, seed=seed)
    rank = select_rank(ssa.sigmas, k, rule="threshold")
    if rank > max_components(w):
        logger.debug(f"Rank {rank} capped at {max_components(w)} for window ({w.l_x}, {w.l_y})")
        rank = max_components(w)
    components = merge_conjugates(image_poles(ssa.basis(rank), w))
    model = fit_amplitude_phase(components, reconstruct(ssa, range(rank)))

    extent = work.rows if cell_axis is Axis.ROW else work.cols
    threshold = n_cells / extent
    model_S, model_G = partition_terms(model, lambda term: abs(term.om(cell_axis)) > threshold)
    S = evaluate_grid(model_S, work.dims)
    G = evaluate_grid(model_G, work.dims)
    R = Image2D(values=work.values - S.values - G.values)

    logger.info(
        f"✅ {len(model_S)} cell terms, {len(model_G)} global terms from rank {rank}, rmse {model.fit_rmse:.3g}"
    )
    return ElDecomposition(
        G=G,
        S=S,
        R=R,
        model_S=model_S,
        model_G=model_G,
        mode=mode,
        window=w,
        n_triples=len(ssa),
        rank=rank,
        threshold=threshold,
        energy_fractions=tuple(float(f) for f in ssa.energy_fractions()),
    )


def _on_axis(model: ParametricModel2D, along: np.ndarray, levels: np.ndarray, axis: Axis) -> np.ndarray:
    """Evaluate with ``along`` on the axis coordinate and ``levels`` on the other; levels x along"""
    if axis is Axis.ROW:
        return evaluate(model, along[None, :], levels[:, None])
    return evaluate(model, levels[:, None], along[None, :])


def _bisect_roots(derivative: ParametricModel2D, lo, hi, levels, axis: Axis, xtol: float) -> np.ndarray:
    """Vectorized bisection of sign changes from negative to nonnegative"""
    while np.any(hi - lo > xtol):
        mid = (lo + hi) / 2
        if axis is Axis.ROW:
            value = evaluate(derivative, mid, levels)
        else:
            value = evaluate(derivative, levels, mid)
        negative = value < 0
        lo = np.where(negative, mid, lo)
        hi = np.where(negative, hi, mid)
    return (lo + hi) / 2


def _chain(minima: List[np.ndarray], axis: Axis) -> List[List[Tuple[float, float]]]:
    gaps = [np.diff(found) for found in minima if found.size > 1]
    spacing = float(np.median(np.concatenate(gaps))) if gaps else math.inf
    tolerance = 0.5 * spacing

    lines: List[List[Tuple[float, float]]] = []
    tails: List[float] = []
    active: List[int] = []
    for level, found in enumerate(minima):
        extended = []
        claimed = set()
        for coordinate in found:
            best, distance = None, tolerance
            for line_index in active:
                gap = abs(tails[line_index] - coordinate)
                if line_index not in claimed and gap <= distance:
                    best, distance = line_index, gap
            point = (float(coordinate), float(level)) if axis is Axis.ROW else (float(level), float(coordinate))
            if best is None:
                lines.append([point])
                tails.append(float(coordinate))
                best = len(lines) - 1
            else:
                lines[best].append(point)
                tails[best] = float(coordinate)
            claimed.add(best)
            extended.append(best)
        active = extended
    return lines


def detect_lines(
    model_S: ParametricModel2D,
    dims: Tuple[int, int],
    refine: int = None,
    cell_axis: Axis = Axis.ROW,
    xtol: float = BISECTION_XTOL,
) -> LineSet:
    """Minima of the cell model along ``cell_axis``, per integer level of the other axis"""
    refine = settings.refine if refine is None else refine
    if len(model_S) == 0:
        raise InvalidInputError("cell model has no terms")
    if refine < 1:
        raise InvalidInputError(f"refine must be at least 1, got {refine}")

    extent, n_levels = (dims[0], dims[1]) if cell_axis is Axis.ROW else (dims[1], dims[0])
    derivative = differentiate(model_S, cell_axis)
    mesh = np.arange((extent - 1) * refine + 1, dtype=np.float64) / refine

    minima: List[np.ndarray] = [np.zeros(0)] * n_levels
    for start in range(0, n_levels, LEVEL_CHUNK):
        levels = np.arange(start, min(start + LEVEL_CHUNK, n_levels), dtype=np.float64)
        slope = _on_axis(derivative, mesh, levels, cell_axis)
        rows, cols = np.nonzero((slope[:, :-1] < 0) & (slope[:, 1:] >= 0))
        roots = _bisect_roots(derivative, mesh[cols], mesh[cols + 1], levels[rows], cell_axis, xtol)
        for offset in range(levels.size):
            minima[start + offset] = np.sort(roots[rows == offset])

    if not any(found.size for found in minima):
        logger.warning("⚠️ No interconnection line minima found")
        return LineSet(lines=[], cell_axis=cell_axis)

    lines = _chain(minima, cell_axis)
    logger.info(f"✅ Detected {len(lines)} lines")
    return LineSet(lines=lines, cell_axis=cell_axis)


def thermal_c0(temperature: float) -> float:
    """q/(kT) in 1/volt for a temperature in kelvin"""
    if not temperature > 0:
        raise InvalidInputError(f"temperature must be positive, got {temperature}")
    return ELEMENTARY_CHARGE / (BOLTZMANN * temperature)


def _derivatives(model: ParametricModel2D, dims, direction: Axis) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    first = differentiate(model, direction)
    second = differentiate(first, direction)
    return (
        evaluate_grid(model, dims).values,
        evaluate_grid(first, dims).values,
        evaluate_grid(second, dims).values,
    )


def voltage_field(I_model: ParametricModel2D, dims: Tuple[int, int], c: float, c0: float) -> Image2D:
    """V = ln(I/c)/c0"""
    intensity = evaluate_grid(I_model, dims).values
    if np.any(intensity <= 0):
        raise NumericalError("intensity model is not positive on the grid")
    return Image2D(values=np.log(intensity / c) / c0)


def voltage_curvature(I_model: ParametricModel2D, dims: Tuple[int, int], c0: float, direction: Axis = Axis.COL) -> Image2D:
    """V'' = (I''I - I'^2)/(c0 I^2) from the analytic derivatives"""
    intensity, slope, curvature = _derivatives(I_model, dims, direction)
    if np.any(intensity <= 0):
        raise NumericalError("intensity model is not positive on the grid")
    return Image2D(values=(curvature * intensity - slope ** 2) / (c0 * intensity ** 2))


def char_length(
    I_model: ParametricModel2D,
    dims: Tuple[int, int],
    c: float,
    c0: float,
    direction: Axis = Axis.COL,
    eps: float = None,
    log_domain: bool = False,
) -> CharLengthField:
    """
    Squared inverse characteristic length from the smooth intensity model

    lambda^2 = (I''I - I'^2) / (I^2 ln(I/c)) with derivatives along ``direction``.
    With ``log_domain`` the model describes L = ln I and lambda^2 = L'' / (L - ln c).
    Pixels where |ln(I/c)| < eps (or I <= 0) are masked and hold lambda^2 = 0.
    """
    eps = settings.charlen_eps if eps is None else eps
    if not c > 0 or not c0 > 0:
        raise InvalidInputError(f"c and c0 must be positive, got c={c}, c0={c0}")

    value, slope, curvature = _derivatives(I_model, dims, direction)
    if log_domain:
        excess = value - math.log(c)
        mask = np.abs(excess) >= eps
        numerator = curvature
        denominator = excess
        voltage = excess / c0
    else:
        positive = value > 0
        excess = np.log(np.where(positive, value, c) / c)
        mask = positive & (np.abs(excess) >= eps)
        numerator = curvature * value - slope ** 2
        denominator = value ** 2 * excess
        voltage = np.where(positive, excess / c0, 0.0)

    if not np.any(mask):
        raise NumericalError("every pixel is masked (|ln(I/c)| below eps or I <= 0)")
    lambda_sq = np.where(mask, numerator / np.where(mask, denominator, 1.0), 0.0)
    if np.sum(lambda_sq[mask] < 0) > mask.sum() / 2:
        logger.warning("⚠️ lambda^2 is negative on most pixels; the intensity model is not log-convex")
    mask.flags.writeable = False
    logger.info(f"✅ lambda^2 on {int(mask.sum())} of {mask.size} pixels")
    return CharLengthField(lambda_sq=Image2D(values=lambda_sq), mask=mask, voltage=Image2D(values=voltage))


def cell_char_length(
    X: Image2D,
    n_cells: int,
    c: float,
    c0: float,
    direction: Axis = Axis.COL,
    mode: DecompositionMode = DecompositionMode.MULTIPLICATIVE,
    k: int = CELL_RANK,
    eps: float = None,
    seed: int = None,
) -> CharLengthField:
    """
    Characteristic length cell by cell

    The image is cut into ``n_cells`` equal strips along ``direction``; each strip
    gets its own decomposition and intensity model. Inside one cell ln I is a
    constant plus two real exponentials, so the default ``k`` is 3.
    A strip whose pixels are all masked stays masked.
    """
    extent = X.cols if direction is Axis.COL else X.rows
    if n_cells < 1 or extent // n_cells < 4:
        raise InvalidInputError(f"{n_cells} cells leave strips under 4 px on an extent of {extent}")
    bounds = np.linspace(0, extent, n_cells + 1).round().astype(int)

    lambda_sq = np.zeros(X.dims)
    voltage = np.zeros(X.dims)
    mask = np.zeros(X.dims, dtype=bool)
    for start, stop in zip(bounds[:-1], bounds[1:]):
        part = np.s_[:, start:stop] if direction is Axis.COL else np.s_[start:stop, :]
        strip = Image2D(values=X.values[part])
        result = el_decompose(strip, n_cells=1, cell_axis=direction, k=k, mode=mode, seed=seed)
        try:
            field = char_length(
                result.model, strip.dims, c, c0, direction, eps,
                log_domain=mode is DecompositionMode.MULTIPLICATIVE,
            )
        except NumericalError as e:
            logger.warning(f"⚠️ Cell at {start}..{stop} left masked: {e}")
            continue
        lambda_sq[part] = field.lambda_sq.values
        voltage[part] = field.voltage.values
        mask[part] = field.mask

    if not np.any(mask):
        raise NumericalError("every cell is masked")
    mask.flags.writeable = False
    logger.info(f"✅ lambda^2 over {n_cells} cells, {int(mask.sum())} valid pixels")
    return CharLengthField(lambda_sq=Image2D(values=lambda_sq), mask=mask, voltage=Image2D(values=voltage))


def estimate_pair_shift(
    first: Series1D,
    second: Series1D,
    band: Tuple[float, float],
    L: int = None,
    k: int = None,
    aggregate: Aggregate = Aggregate.MAX,
) -> PairShift:
    """Shift d with second(x) ~ first(x + d), from phase differences of in-band MSSA components"""
    k = settings.mssa_k if k is None else k
    d = decompose_mssa(first, second, L, k)
    rank = select_rank(d.sigmas, k, rule="gap")
    if rank == 0:
        return PairShift(flagged=True)

    components: List[ComponentDescriptor] = merge_conjugates(esprit_1d(d.basis(rank)))
    in_band = [i for i, c in enumerate(components) if band[0] <= c.om_r <= band[1]]
    if not in_band:
        return PairShift(flagged=True)

    model_a = channel_model(d, Channel.FIRST, components, rank)
    model_b = channel_model(d, Channel.SECOND, components, rank)
    estimates = []
    for i in in_band:
        a, b = model_a.terms[i], model_b.terms[i]
        if min(a.s, b.s) <= 1e-9 * max(a.s, b.s, 1e-300):
            continue
        estimates.append((a.om_r, wrap_phase(b.phi - a.phi) / (2 * math.pi * a.om_r)))
    if not estimates:
        return PairShift(flagged=True)

    shifts = [shift for _, shift in estimates]
    value = max(shifts) if aggregate is Aggregate.MAX else float(np.median(shifts))
    return PairShift(shift=value, components=estimates)


def _slices(X: Image2D, slice_axis: Axis) -> np.ndarray:
    return X.values if slice_axis is Axis.ROW else X.values.T


async def _estimate_pairs(slices, pairs, band, L, k, aggregate, threads) -> List[PairShift]:
    semaphore = asyncio.Semaphore(threads)

    async def estimate(i: int) -> PairShift:
        async with semaphore:
            return await asyncio.to_thread(
                estimate_pair_shift,
                Series1D(values=slices[i - 1]),
                Series1D(values=slices[i]),
                band,
                L,
                k,
                aggregate,
            )

    return await asyncio.gather(*(estimate(i) for i in pairs))


def stitch_displacement(
    X: Image2D,
    slice_axis: Axis = Axis.ROW,
    L: int = None,
    cell_band: Tuple[float, float] = (0.02, 0.2),
    rows: Optional[Tuple[int, int]] = None,
    k: int = None,
    aggregate: Aggregate = Aggregate.MAX,
    threads: int = None,
) -> DisplacementMap:
    """
    Displacement map of adjacent slices (rows for ``slice_axis`` ROW)

    Args:
        cell_band: (f_lo, f_hi) frequencies of the cell components, cycles per pixel
        rows: optional half-open slice range; pairs outside it keep shift 0
        threads: pairs estimated concurrently
    """
    threads = settings.threads if threads is None else threads
    if not 0.0 < cell_band[0] < cell_band[1] < 0.5:
        raise InvalidInputError(f"cell band {cell_band} must satisfy 0 < f_lo < f_hi < 0.5")
    slices = _slices(X, slice_axis)
    count = slices.shape[0]
    if count < 2 or slices.shape[1] < 3:
        raise InvalidInputError(f"need at least 2 slices of length 3, got {slices.shape}")
    start, stop = (0, count) if rows is None else rows
    if not 0 <= start < stop <= count:
        raise InvalidInputError(f"slice range {rows} outside 0..{count}")
    pairs = list(range(start + 1, stop))

    logger.info(f"🚀 Estimating {len(pairs)} slice shifts ({threads} threads)")
    if threads > 1:
        results = asyncio.run(_estimate_pairs(slices, pairs, cell_band, L, k, aggregate, threads))
    else:
        results = [
            estimate_pair_shift(
                Series1D(values=slices[i - 1]), Series1D(values=slices[i]), cell_band, L, k, aggregate
            )
            for i in pairs
        ]

    shifts = [0.0] * (count - 1)
    flagged = []
    for i, result in zip(pairs, results):
        shifts[i - 1] = result.shift
        if result.flagged:
            flagged.append(i)
    if flagged:
        logger.warning(f"⚠️ No in-band cell component for slice pairs ending at {flagged}")
    return DisplacementMap(shifts=tuple(shifts), axis=slice_axis, flagged=tuple(flagged))


def apply_displacement(X: Image2D, M: DisplacementMap) -> Image2D:
    """out_i(x) = X_i(x + D_i), D = cumulative shifts from 0; linear interpolation, edge values held"""
    slices = _slices(X, M.axis)
    if len(M.shifts) != slices.shape[0] - 1:
        raise InvalidInputError(f"map of {len(M.shifts)} shifts for {slices.shape[0]} slices")
    x = np.arange(slices.shape[1], dtype=np.float64)
    moved = np.stack([np.interp(x + offset, x, row) for offset, row in zip(M.absolute(), slices)])
    return Image2D(values=moved if M.axis is Axis.ROW else moved.T)


def shift_accuracy(
    shift: float = 7.0,
    n: int = 1000,
    repeats: int = 100,
    band: Tuple[float, float] = (0.025, 0.075),
    L: int = None,
    k: int = None,
    aggregate: Aggregate = Aggregate.MEDIAN,
    noise_sigma: float = 1.0,
    first_seed: int = 0,
) -> ShiftAccuracyReport:
    """
    Shift-estimation accuracy over noise seeds on the two-series simulation

    The study scores the in-band signal components together, so it aggregates
    with the median; pass ``Aggregate.MAX`` to score the stitch rule instead.
    """
    if repeats < 1:
        raise InvalidInputError(f"repeats must be positive, got {repeats}")
    estimates = []
    for seed in range(first_seed, first_seed + repeats):
        a, b = gen_s1_s2(shift, n, seed, noise_sigma)
        estimates.append(estimate_pair_shift(a, b, band, L, k, aggregate).shift)
    values = np.array(estimates)
    report = ShiftAccuracyReport(
        shift=shift,
        repeats=repeats,
        rmse=float(np.sqrt(np.mean((values - shift) ** 2))),
        mean=float(values.mean()),
        q25=float(np.quantile(values, 0.25)),
        q75=float(np.quantile(values, 0.75)),
        estimates=estimates,
    )
    logger.info(f"🏁 Shift accuracy: mean {report.mean:.4f}, rmse {report.rmse:.4f}")
    return report
