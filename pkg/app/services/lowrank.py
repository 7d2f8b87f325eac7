"""Truncated SVD of implicit operators by Golub-Kahan-Lanczos bidiagonalization.

Only ``matvec``/``rmatvec`` of the operator are used. The bidiagonalization keeps
full bases and reorthogonalizes every new vector against them, so the Ritz
triples extracted from the small bidiagonal matrix stay accurate to working
precision once their residual is below the tolerance.
"""
import logging
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy import linalg
from scipy.sparse.linalg import LinearOperator

from app.config import settings
from app.errors import ConvergenceError, InvalidInputError
from app.models import EmbeddingWindow

logger = logging.getLogger(__name__)

RANK_CUTOFF = 1e-9
BREAKDOWN = 1e-11
DENSE_ORACLE_GUARD = 1_000_000


class SvdTruncation(BaseModel):
    """Ordered singular triples; columns of ``u``/``v`` pair with ``sigmas``"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    sigmas: np.ndarray
    u: np.ndarray
    v: np.ndarray
    window: Optional[EmbeddingWindow] = None
    dims: Optional[Tuple[int, int]] = None

    @model_validator(mode="after")
    def _check_layout(self) -> "SvdTruncation":
        if self.sigmas.ndim != 1 or self.u.ndim != 2 or self.v.ndim != 2:
            raise ValueError("sigmas must be a vector and u, v matrices")
        count = self.sigmas.shape[0]
        if self.u.shape[1] != count or self.v.shape[1] != count:
            raise ValueError(
                f"{count} singular values but {self.u.shape[1]} left / {self.v.shape[1]} right vectors"
            )
        if np.any(self.sigmas < 0) or np.any(np.diff(self.sigmas) > 0):
            raise ValueError("singular values must be nonnegative and non-increasing")
        for array in (self.sigmas, self.u, self.v):
            array.flags.writeable = False
        return self

    def __len__(self) -> int:
        return self.sigmas.shape[0]

    @property
    def triples(self) -> List[Tuple[float, np.ndarray, np.ndarray]]:
        return [(float(self.sigmas[i]), self.u[:, i], self.v[:, i]) for i in range(len(self))]

    def numerical_rank(self, cutoff: float = RANK_CUTOFF) -> int:
        if len(self) == 0:
            return 0
        return int(np.sum(self.sigmas > cutoff * self.sigmas[0]))


def _empty(shape: Tuple[int, int], window, dims) -> SvdTruncation:
    return SvdTruncation(
        sigmas=np.zeros(0),
        u=np.zeros((shape[0], 0)),
        v=np.zeros((shape[1], 0)),
        window=window,
        dims=dims,
    )


def _orthogonalize(vector: np.ndarray, basis: np.ndarray) -> np.ndarray:
    # classical Gram-Schmidt, applied twice
    for _ in range(2):
        vector = vector - basis @ (basis.T @ vector)
    return vector


def _grow(basis: np.ndarray, needed: int, limit: int) -> np.ndarray:
    if needed <= basis.shape[1]:
        return basis
    capacity = min(max(needed, 2 * basis.shape[1]), limit)
    grown = np.zeros((basis.shape[0], capacity))
    grown[:, : basis.shape[1]] = basis
    return grown


class _Bidiagonalization:
    """A V_j = U_j B_j and A^T U_j = V_j B_j^T + beta_j v_{j+1} e_j^T"""

    def __init__(self, op: LinearOperator, rng: np.random.Generator, capacity: int):
        self.op = op
        self.rng = rng
        self.m, self.n = op.shape
        self.cap = min(self.m, self.n)
        capacity = min(capacity, self.cap) + 1
        self.U = np.zeros((self.m, capacity))
        self.V = np.zeros((self.n, capacity))
        self.alphas: List[float] = []
        self.betas: List[float] = []
        self.scale = 0.0

        start = rng.standard_normal(self.n)
        self.V[:, 0] = start / np.linalg.norm(start)

    @property
    def depth(self) -> int:
        return len(self.alphas)

    @property
    def u_exhausted(self) -> bool:
        return self.depth == self.m

    def _fresh(self, size: int, basis: np.ndarray) -> np.ndarray:
        vector = _orthogonalize(self.rng.standard_normal(size), basis)
        return vector / np.linalg.norm(vector)

    def extend(self, target: int) -> None:
        target = min(target, self.cap)
        self.U = _grow(self.U, target + 1, self.cap + 1)
        self.V = _grow(self.V, target + 1, self.cap + 1)

        while self.depth < target:
            j = self.depth
            p = self.op.matvec(self.V[:, j])
            if j > 0:
                p = p - self.betas[-1] * self.U[:, j - 1]
            p = _orthogonalize(p, self.U[:, :j])
            alpha = float(np.linalg.norm(p))
            self.scale = max(self.scale, alpha)
            if alpha <= BREAKDOWN * self.scale or alpha == 0.0:
                alpha = 0.0
                self.U[:, j] = self._fresh(self.m, self.U[:, :j])
            else:
                self.U[:, j] = p / alpha
            self.alphas.append(alpha)

            r = self.op.rmatvec(self.U[:, j]) - alpha * self.V[:, j]
            r = _orthogonalize(r, self.V[:, : j + 1])
            beta = float(np.linalg.norm(r))
            self.scale = max(self.scale, beta)
            if j + 1 == self.n:
                beta = 0.0
            elif beta <= BREAKDOWN * self.scale or beta == 0.0:
                beta = 0.0
                self.V[:, j + 1] = self._fresh(self.n, self.V[:, : j + 1])
            else:
                self.V[:, j + 1] = r / beta
            self.betas.append(beta)

    def ritz(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Ritz values, left/right Ritz vectors and residual norms"""
        j = self.depth
        B = np.diag(self.alphas) + np.diag(self.betas[:-1], 1)
        if self.u_exhausted and self.betas[-1] > 0:
            # U spans the whole range: A V_{j+1} = U_j [B | beta e_j] holds exactly
            B = np.hstack([B, np.zeros((j, 1))])
            B[-1, -1] = self.betas[-1]
            P, sigmas, Qt = linalg.svd(B, full_matrices=False)
            residuals = np.zeros_like(sigmas)
            return sigmas, self.U[:, :j] @ P, self.V[:, : j + 1] @ Qt.T, residuals

        P, sigmas, Qt = linalg.svd(B, full_matrices=False)
        if j == self.cap:
            residuals = np.zeros_like(sigmas)
        else:
            residuals = np.abs(self.betas[-1] * P[-1, :])
        return sigmas, self.U[:, :j] @ P, self.V[:, :j] @ Qt.T, residuals


def truncated_svd(
    op: LinearOperator,
    k: int,
    tol: float = None,
    max_iter: int = None,
    seed: int = None,
) -> SvdTruncation:
    """Leading ``k`` singular triples of ``op``.

    Triples with sigma below ``1e-9 * sigma_1`` are dropped, so fewer than ``k``
    triples come back for operators of lower numerical rank. ``max_iter`` counts
    Krylov extension rounds (default ``10 * k``).
    """
    tol = settings.lanczos_tol if tol is None else tol
    seed = settings.lanczos_seed if seed is None else seed
    max_iter = 10 * k if max_iter is None else max_iter
    m, n = op.shape
    window = getattr(op, "window", None)
    dims = window.dims if window is not None else None

    if k < 1:
        raise InvalidInputError(f"k must be positive, got {k}")
    if k >= min(m, n):
        raise InvalidInputError(f"k={k} must be below min{op.shape}={min(m, n)}")
    if not tol > 0:
        raise InvalidInputError(f"tol must be positive, got {tol}")
    if getattr(op, "is_zero", False):
        logger.debug("Zero operator, no singular triples")
        return _empty(op.shape, window, dims)

    cap = min(m, n)
    depth = min(cap, max(2 * k + 2, 20))
    lanczos = _Bidiagonalization(op, np.random.default_rng(seed), depth)
    rounds = 0
    while True:
        lanczos.extend(depth)
        sigmas, U, V, residuals = lanczos.ritz()
        sigma_1 = sigmas[0] if sigmas.size else 0.0
        wanted = min(k, sigmas.size)
        converged = int(np.sum(residuals[:wanted] <= tol * sigma_1))
        if converged == wanted or lanczos.depth == cap:
            break
        rounds += 1
        if rounds > max_iter:
            raise ConvergenceError(
                f"Lanczos did not converge: {converged} of {k} triples after depth {lanczos.depth}",
                converged=converged,
            )
        depth = min(cap, depth + max(k, 10, depth // 4))

    keep = sigmas[:wanted] > RANK_CUTOFF * sigma_1 if sigma_1 > 0 else np.zeros(wanted, dtype=bool)
    count = int(np.sum(keep))
    logger.debug(f"✅ Lanczos depth {lanczos.depth}: {count} triples (k={k})")
    return SvdTruncation(
        sigmas=sigmas[:count].copy(),
        u=U[:, :count].copy(),
        v=V[:, :count].copy(),
        window=window,
        dims=dims,
    )


def dense_svd_oracle(matrix: np.ndarray, guard: int = DENSE_ORACLE_GUARD) -> SvdTruncation:
    """Full SVD by a direct method, zero singular values included"""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise InvalidInputError(f"expected a matrix, got shape {matrix.shape}")
    if matrix.size > guard:
        raise InvalidInputError(f"matrix with {matrix.size} entries exceeds the oracle guard {guard}")
    U, sigmas, Vt = linalg.svd(matrix, full_matrices=False)
    return SvdTruncation(sigmas=sigmas, u=U, v=Vt.T)


def energy_fractions(truncation: SvdTruncation, total: float) -> np.ndarray:
    """sigma_i^2 / ||X||_F^2 per triple"""
    if total <= 0:
        return np.zeros(len(truncation))
    return truncation.sigmas ** 2 / total


def triples_for_energy(fractions: np.ndarray, level: float = 0.999) -> int:
    """Smallest count of leading triples whose energy reaches ``level``"""
    cumulative = np.cumsum(fractions)
    reached = np.nonzero(cumulative >= level)[0]
    return int(reached[0]) + 1 if reached.size else len(fractions)
