import logging
import math
from typing import Callable, Iterable, List, Sequence, Tuple, Union

import numpy as np
from scipy import linalg

from app.errors import RankDeficientError
from app.models import Axis, ComponentDescriptor, ParametricModel2D, SinusoidTerm
from app.services.grid import Image2D

logger = logging.getLogger(__name__)

RANK_RATIO = 1e-10
FIT_CHUNK_ROWS = 65536

ComponentLike = Union[ComponentDescriptor, Tuple[float, float, float, float]]


def _as_component(component: ComponentLike) -> ComponentDescriptor:
    if isinstance(component, ComponentDescriptor):
        return component
    rho_r, rho_c, om_r, om_c = component
    return ComponentDescriptor(rho_r=rho_r, rho_c=rho_c, om_r=om_r, om_c=om_c)


def _envelope_and_argument(rho_r, rho_c, om_r, om_c, n, m) -> Tuple[np.ndarray, np.ndarray]:
    envelope = np.exp(n * math.log(rho_r) + m * math.log(rho_c))
    argument = 2 * math.pi * (om_r * n + om_c * m)
    return envelope, argument


def evaluate(model: ParametricModel2D, n, m) -> np.ndarray:
    """Analytic value of the model at real coordinates (n, m); arrays broadcast"""
    n = np.asarray(n, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    total = np.zeros(np.broadcast(n, m).shape)
    for term in model.terms:
        envelope, argument = _envelope_and_argument(term.rho_r, term.rho_c, term.om_r, term.om_c, n, m)
        total = total + term.s * envelope * np.cos(argument + term.phi)
    return total


def evaluate_grid(model: ParametricModel2D, dims: Tuple[int, int]) -> Image2D:
    n = np.arange(dims[0], dtype=np.float64)[:, None]
    m = np.arange(dims[1], dtype=np.float64)[None, :]
    return Image2D(values=evaluate(model, n, m))


def differentiate(model: ParametricModel2D, axis: Axis) -> ParametricModel2D:
    """Derivative along the continuous coordinate of ``axis``, term by term.

    d/dx [rho^x cos(2 pi om x + phi)] = sqrt(ln(rho)^2 + (2 pi om)^2) rho^x cos(2 pi om x + phi + atan2(2 pi om, ln rho))
    """
    terms = []
    for term in model.terms:
        rate = math.log(term.rho(axis))
        angular = 2 * math.pi * term.om(axis)
        terms.append(
            SinusoidTerm(
                s=term.s * math.hypot(rate, angular),
                rho_r=term.rho_r,
                rho_c=term.rho_c,
                om_r=term.om_r,
                om_c=term.om_c,
                phi=term.phi + math.atan2(angular, rate),
            )
        )
    return ParametricModel2D(terms=tuple(terms))


def filter_terms(model: ParametricModel2D, predicate: Callable[[SinusoidTerm], bool]) -> ParametricModel2D:
    return ParametricModel2D(terms=tuple(t for t in model.terms if predicate(t)), fit_rmse=model.fit_rmse)


def partition_terms(
    model: ParametricModel2D, predicate: Callable[[SinusoidTerm], bool]
) -> Tuple[ParametricModel2D, ParametricModel2D]:
    """(terms satisfying the predicate, all other terms)"""
    kept = filter_terms(model, predicate)
    rest = filter_terms(model, lambda t: not predicate(t))
    return kept, rest


def _regressor_columns(
    components: Sequence[ComponentDescriptor], n: np.ndarray, m: np.ndarray, with_sin: Sequence[bool]
) -> np.ndarray:
    columns = []
    for component, sin_column in zip(components, with_sin):
        envelope, argument = _envelope_and_argument(
            component.rho_r, component.rho_c, component.om_r, component.om_c, n, m
        )
        columns.append(envelope * np.cos(argument))
        if sin_column:
            columns.append(-envelope * np.sin(argument))
    return np.stack(columns, axis=1)


def _offending_pair(R: np.ndarray, column: int, owners: List[int]) -> Tuple[int, int]:
    gram = R.T @ R
    correlation = np.abs(gram[column]) / np.sqrt(np.maximum(np.diag(gram) * gram[column, column], 1e-300))
    correlation[column] = -1.0
    partner = int(np.argmax(correlation))
    pair = sorted((owners[column], owners[partner]))
    return (pair[0], pair[1])


def fit_amplitude_phase(components: Iterable[ComponentLike], target: Image2D) -> ParametricModel2D:
    """Least-squares amplitudes and phases of fixed damped-cosine components.

    Each component contributes the regressors rho^x cos(2 pi om.x) and -rho^x sin(2 pi om.x);
    the coefficients (A, B) give s = hypot(A, B) and phi = atan2(B, A). A component
    whose sine regressor vanishes on the grid (frequencies 0 or 1/2) keeps only
    the cosine. The normal equations are never formed: the augmented regressor
    matrix is reduced by a QR sweep over row chunks.
    """
    components = [_as_component(c) for c in components]
    if not components:
        return ParametricModel2D(terms=(), fit_rmse=float(np.sqrt(np.mean(target.values ** 2))))

    n_x, n_y = target.dims
    total = n_x * n_y
    probe_n = np.arange(n_x, dtype=np.float64)[:, None]
    probe_m = np.arange(n_y, dtype=np.float64)[None, :]

    # column norms over the whole grid decide sine usage and scaling
    with_sin, norms, owners = [], [], []
    for index, component in enumerate(components):
        envelope, argument = _envelope_and_argument(
            component.rho_r, component.rho_c, component.om_r, component.om_c, probe_n, probe_m
        )
        cos_norm = float(np.linalg.norm(envelope * np.cos(argument)))
        sin_norm = float(np.linalg.norm(envelope * np.sin(argument)))
        use_sin = sin_norm > RANK_RATIO * max(cos_norm, sin_norm)
        with_sin.append(use_sin)
        norms.append(cos_norm)
        owners.append(index)
        if use_sin:
            norms.append(sin_norm)
            owners.append(index)

    p = len(norms)
    if total < p:
        raise RankDeficientError(f"{p} regressors but only {total} samples", pair=None)
    norms = np.array(norms)
    if np.any(norms == 0):
        column = int(np.argmin(norms))
        raise RankDeficientError(
            f"component {owners[column]} vanishes on the grid", pair=(owners[column], owners[column])
        )

    flat_target = target.values.ravel()
    R_aug = None
    for start in range(0, total, FIT_CHUNK_ROWS):
        index = np.arange(start, min(start + FIT_CHUNK_ROWS, total))
        n, m = (index // n_y).astype(np.float64), (index % n_y).astype(np.float64)
        block = np.column_stack([_regressor_columns(components, n, m, with_sin) / norms, flat_target[index]])
        stacked = block if R_aug is None else np.vstack([R_aug, block])
        R_aug = linalg.qr(stacked, mode="r", check_finite=False)[0][: p + 1]

    R = R_aug[:p, :p]
    diagonal = np.abs(np.diag(R))
    ratios = diagonal / diagonal.max()
    if np.any(ratios <= RANK_RATIO):
        column = int(np.argmax(ratios <= RANK_RATIO))
        pair = _offending_pair(R, column, owners)
        raise RankDeficientError(f"regressors of components {pair} are linearly dependent", pair=pair)

    coefficients = linalg.solve_triangular(R, R_aug[:p, p]) / norms
    residual = abs(R_aug[p, p]) if R_aug.shape[0] > p else 0.0

    terms = []
    cursor = 0
    for component, use_sin in zip(components, with_sin):
        a = coefficients[cursor]
        b = coefficients[cursor + 1] if use_sin else 0.0
        cursor += 2 if use_sin else 1
        terms.append(
            SinusoidTerm(
                s=math.hypot(a, b),
                rho_r=component.rho_r,
                rho_c=component.rho_c,
                om_r=component.om_r,
                om_c=component.om_c,
                phi=math.atan2(b, a),
            )
        )
    fit_rmse = residual / math.sqrt(total)
    logger.debug(f"Fitted {len(terms)} terms, rmse {fit_rmse:.3g}")
    return ParametricModel2D(terms=tuple(terms), fit_rmse=fit_rmse)
