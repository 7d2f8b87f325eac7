"""Shift-invariance (ESPRIT) estimation of damped-sinusoid poles.

The left singular subspace of a trajectory matrix built from a sum of damped
complex exponentials is invariant under a one-sample shift. Solving the
shifted-basis least-squares problem gives a small matrix whose eigenvalues are
the poles; in 2D a fixed linear combination of the row and column shift
matrices is diagonalized so the two per-axis poles of each component come out
paired.
"""
import cmath
import logging
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from app.config import settings
from app.errors import IllConditionedError, InvalidInputError, RankDeficientError
from app.models import ComponentDescriptor, EmbeddingWindow, PoleEstimate

logger = logging.getLogger(__name__)

MAX_CONDITION = 1e12
SHIFT_RANK_RATIO = 1e-12
FREQUENCY_ZERO = 1e-12
POLE_ZERO = 1e-12


def _shift_solve(up: np.ndarray, down: np.ndarray, label: str) -> np.ndarray:
    """Least-squares F with up @ F ~= down, via QR of the upper sub-basis"""
    if up.shape[0] < up.shape[1]:
        raise InvalidInputError(
            f"{label} shift system has {up.shape[0]} rows for {up.shape[1]} unknowns"
        )
    Q, R = linalg.qr(up, mode="economic")
    diagonal = np.abs(np.diag(R))
    if diagonal.size and diagonal.min() <= SHIFT_RANK_RATIO * diagonal.max():
        raise RankDeficientError(f"{label} shift system is rank deficient")
    return linalg.solve_triangular(R, Q.T @ down)


def max_components(w: EmbeddingWindow) -> int:
    """Largest subspace the shift systems of window ``w`` can resolve"""
    if w.l_x >= 2 and w.l_y >= 2:
        return min((w.l_x - 1) * w.l_y, w.l_x * (w.l_y - 1))
    return max(w.l_x, w.l_y) - 1


def esprit_1d(basis: np.ndarray, L: int = None) -> List[PoleEstimate]:
    """Poles from an L x r basis of a 1D (or multichannel) trajectory subspace"""
    basis = np.asarray(basis, dtype=np.float64)
    if basis.ndim != 2 or basis.shape[1] < 1:
        raise InvalidInputError(f"expected an L x r basis with r >= 1, got shape {basis.shape}")
    if L is not None and basis.shape[0] != L:
        raise InvalidInputError(f"basis has {basis.shape[0]} rows but the window is {L}")
    if basis.shape[0] - 1 < basis.shape[1]:
        raise InvalidInputError(f"window {basis.shape[0]} too short for {basis.shape[1]} components")

    F = _shift_solve(basis[:-1], basis[1:], "row")
    return [PoleEstimate(z_r=complex(z)) for z in linalg.eigvals(F)]


def esprit_2d(basis: np.ndarray, w: EmbeddingWindow, gamma: float = None) -> List[PoleEstimate]:
    """Paired (row, column) poles from an L_xL_y x r basis of the HbH subspace"""
    gamma = settings.pairing_gamma if gamma is None else gamma
    basis = np.asarray(basis, dtype=np.float64)
    if basis.ndim != 2 or basis.shape[1] < 1 or basis.shape[0] != w.l_x * w.l_y:
        raise InvalidInputError(
            f"expected a {w.l_x * w.l_y} x r basis for window ({w.l_x}, {w.l_y}), got {basis.shape}"
        )
    if w.l_x < 2 or w.l_y < 2:
        raise InvalidInputError(f"2D ESPRIT needs L_x >= 2 and L_y >= 2, got ({w.l_x}, {w.l_y})")

    # basis row j*L_x + a holds window position (row a, column j)
    inner = np.arange(basis.shape[0]) % w.l_x
    block = np.arange(basis.shape[0]) // w.l_x
    F_r = _shift_solve(basis[inner < w.l_x - 1], basis[inner > 0], "row")
    F_c = _shift_solve(basis[block < w.l_y - 1], basis[block > 0], "column")

    _, T = linalg.eig(F_r + gamma * F_c)
    condition = float(np.linalg.cond(T))
    if not condition <= MAX_CONDITION:
        raise IllConditionedError(
            f"joint eigenbasis is ill-conditioned (cond={condition:.3g})", condition=condition
        )
    z_r = np.diag(linalg.solve(T, F_r @ T))
    z_c = np.diag(linalg.solve(T, F_c @ T))
    return [PoleEstimate(z_r=complex(a), z_c=complex(b)) for a, b in zip(z_r, z_c)]


def _pole_pair(pole: PoleEstimate) -> Tuple[complex, complex]:
    return pole.z_r, (1.0 + 0.0j) if pole.z_c is None else pole.z_c


def _axis_parameters(z: complex, real: bool) -> Tuple[float, float]:
    if real:
        return abs(z.real), (0.5 if z.real < 0 else 0.0)
    return abs(z), cmath.phase(z) / (2 * math.pi)


def _descriptor(z_r: complex, z_c: complex, real: bool, unpaired: bool = False) -> ComponentDescriptor:
    rho_r, om_r = _axis_parameters(z_r, real)
    rho_c, om_c = _axis_parameters(z_c, real)
    if om_r < -FREQUENCY_ZERO or (abs(om_r) <= FREQUENCY_ZERO and om_c < 0):
        om_r, om_c = -om_r, -om_c
    if abs(om_r) <= FREQUENCY_ZERO:
        om_r = 0.0
    return ComponentDescriptor(
        rho_r=rho_r,
        rho_c=rho_c,
        om_r=min(max(om_r, -0.5), 0.5),
        om_c=min(max(om_c, -0.5), 0.5),
        unpaired=unpaired,
    )


def merge_conjugates(poles: Sequence[PoleEstimate], tol: float = None) -> List[ComponentDescriptor]:
    """Merge conjugate pole pairs into real components.

    Candidates are pairs (distance |z_i - conj(z_j)| summed over both axes) and
    self-conjugate singles (distance |z - conj(z)|); they are accepted greedily
    from the closest while within ``tol``. Leftover complex poles are kept as
    components flagged ``unpaired``.
    """
    tol = settings.pairing_tol if tol is None else tol
    if not tol > 0:
        raise InvalidInputError(f"pairing tolerance must be positive, got {tol}")

    values = []
    for pole in poles:
        z_r, z_c = _pole_pair(pole)
        if abs(z_r) <= POLE_ZERO or abs(z_c) <= POLE_ZERO:
            logger.warning(f"⚠️ Dropping degenerate pole ({z_r:.3g}, {z_c:.3g})")
            continue
        values.append((z_r, z_c))

    candidates = []
    for i, (a_r, a_c) in enumerate(values):
        candidates.append((abs(a_r - a_r.conjugate()) + abs(a_c - a_c.conjugate()), i, i))
        for j in range(i + 1, len(values)):
            b_r, b_c = values[j]
            candidates.append((abs(a_r - b_r.conjugate()) + abs(a_c - b_c.conjugate()), i, j))
    candidates.sort(key=lambda item: item[0])

    used = set()
    components = []
    for distance, i, j in candidates:
        if distance > tol:
            break
        if i in used or j in used:
            continue
        used.update((i, j))
        if i == j:
            components.append(_descriptor(*values[i], real=True))
        else:
            z_r = (values[i][0] + values[j][0].conjugate()) / 2
            z_c = (values[i][1] + values[j][1].conjugate()) / 2
            components.append(_descriptor(z_r, z_c, real=False))

    for index, (z_r, z_c) in enumerate(values):
        if index not in used:
            logger.warning(f"⚠️ Unpaired pole ({z_r:.6g}, {z_c:.6g}) kept as its own component")
            components.append(_descriptor(z_r, z_c, real=False, unpaired=True))
    return components


def select_rank(
    sigmas: np.ndarray,
    k: int,
    rule: str = "threshold",
    floor: float = None,
) -> int:
    """Subspace size for ESPRIT.

    ``threshold`` counts sigma_i >= floor * sigma_1. ``gap`` cuts at the largest
    ratio sigma_i / sigma_(i+1) among the values above the floor, unless the floor
    itself already cuts the spectrum (exactly low-rank input).
    """
    floor = settings.rank_floor if floor is None else floor
    if rule not in ("threshold", "gap"):
        raise InvalidInputError(f"unknown rank rule {rule!r}")
    sigmas = np.asarray(sigmas, dtype=np.float64)
    truncated = sigmas.size < k
    sigmas = sigmas[:k]
    if sigmas.size == 0 or sigmas[0] <= 0:
        return 0
    above = int(np.sum(sigmas >= floor * sigmas[0]))
    if rule == "threshold":
        return above
    # a spectrum that ends (or drops below the floor) within k is exactly low-rank
    if truncated or above < sigmas.size or above < 2:
        return above
    ratios = sigmas[:-1] / sigmas[1:]
    return int(np.argmax(ratios)) + 1


def pole_table(components: Sequence[ComponentDescriptor]) -> List[Tuple[float, float, float, float, bool]]:
    """(rho_r, rho_c, om_r, om_c, unpaired) rows, sorted by row frequency"""
    rows = [(c.rho_r, c.rho_c, c.om_r, c.om_c, c.unpaired) for c in components]
    return sorted(rows, key=lambda row: (row[2], row[3]))


def estimate_components(
    basis: np.ndarray,
    w: Optional[EmbeddingWindow] = None,
    tol: float = None,
) -> List[ComponentDescriptor]:
    """ESPRIT (2D when a window is given, else 1D) followed by conjugate merging"""
    poles = esprit_2d(basis, w) if w is not None else esprit_1d(basis)
    return merge_conjugates(poles, tol)
