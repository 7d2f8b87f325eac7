"""Hankel-block-Hankel trajectory operator of 2D-SSA.

Row index of the trajectory matrix is ``j * L_x + a`` (block row j, inner row a),
column index is ``i * K_x + b``; the entry is ``x(a + b, j + i)``. Vectors are
reshaped in column-major order so that a row vector becomes an ``L_x x L_y``
array and a column vector a ``K_x x K_y`` array.
"""
import logging
from typing import Iterable, Sequence, Tuple

import numpy as np
from scipy import fft
from scipy.sparse.linalg import LinearOperator

from app.config import settings
from app.errors import InvalidInputError
from app.models import EmbeddingWindow
from app.services.grid import Image2D

logger = logging.getLogger(__name__)

RankOneTerm = Tuple[float, np.ndarray, np.ndarray]


def _check_window(img: Image2D, w: EmbeddingWindow) -> None:
    if w.dims != img.dims:
        raise InvalidInputError(f"window is bound to {w.dims} but the image is {img.dims}")


def _padded_dims(dims: Tuple[int, int]) -> Tuple[int, int]:
    return (fft.next_fast_len(dims[0], real=True), fft.next_fast_len(dims[1], real=True))


class HbhOperator(LinearOperator):
    """Implicit L_xL_y x K_xK_y trajectory matrix with FFT products

    Products reuse two zero-padded work buffers, so one operator must not be
    applied from several threads at once.
    """

    def __init__(self, source: Image2D, window: EmbeddingWindow):
        _check_window(source, window)
        super().__init__(dtype=np.float64, shape=window.shape)
        self.source = source
        self.window = window
        self._pad = _padded_dims(source.dims)
        spectrum = fft.rfft2(source.values, s=self._pad)
        spectrum.flags.writeable = False
        self._spectrum = spectrum
        self._buffers = {
            (window.k_x, window.k_y): np.zeros(self._pad),
            (window.l_x, window.l_y): np.zeros(self._pad),
        }

    @property
    def is_zero(self) -> bool:
        return not np.any(self.source.values)

    def _correlate(self, block: np.ndarray, out_dims: Tuple[int, int]) -> np.ndarray:
        # circular cross-correlation of the image with `block`; no wrap-around
        # reaches the retained corner because pad >= N along both axes
        buffer = self._buffers[block.shape]
        buffer[: block.shape[0], : block.shape[1]] = block
        product = fft.rfft2(buffer)
        np.conjugate(product, out=product)
        product *= self._spectrum
        return fft.irfft2(product, s=self._pad, overwrite_x=True)[: out_dims[0], : out_dims[1]]

    def _matvec(self, v: np.ndarray) -> np.ndarray:
        w = self.window
        block = np.reshape(np.ravel(v), (w.k_x, w.k_y), order="F")
        return self._correlate(block, (w.l_x, w.l_y)).ravel(order="F")

    def _rmatvec(self, u: np.ndarray) -> np.ndarray:
        w = self.window
        block = np.reshape(np.ravel(u), (w.l_x, w.l_y), order="F")
        return self._correlate(block, (w.k_x, w.k_y)).ravel(order="F")


def make_operator(img: Image2D, w: EmbeddingWindow) -> HbhOperator:
    return HbhOperator(img, w)


def matvec(op: HbhOperator, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (op.shape[1],):
        raise InvalidInputError(f"expected a vector of length {op.shape[1]}, got shape {v.shape}")
    return op.matvec(v)


def rmatvec(op: HbhOperator, u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (op.shape[0],):
        raise InvalidInputError(f"expected a vector of length {op.shape[0]}, got shape {u.shape}")
    return op.rmatvec(u)


def dense_hbh(img: Image2D, w: EmbeddingWindow, guard: int = None) -> np.ndarray:
    """Materialized trajectory matrix (test oracle)"""
    _check_window(img, w)
    guard = settings.dense_guard if guard is None else guard
    n_rows, n_cols = w.shape
    if n_rows * n_cols > guard:
        raise InvalidInputError(f"dense trajectory matrix {n_rows}x{n_cols} exceeds {guard} entries")

    rows = np.arange(n_rows)
    cols = np.arange(n_cols)
    a, j = rows % w.l_x, rows // w.l_x
    b, i = cols % w.k_x, cols // w.k_x
    return img.values[a[:, None] + b[None, :], j[:, None] + i[None, :]]


def _hankel_weights(n: int, l: int) -> np.ndarray:
    k = n - l + 1
    idx = np.arange(n)
    return np.minimum.reduce([idx + 1, np.full(n, l), np.full(n, k), n - idx])


def pixel_weights(w: EmbeddingWindow, dims: Tuple[int, int] = None) -> Image2D:
    """Number of trajectory-matrix entries that map to each pixel"""
    if dims is not None and tuple(dims) != w.dims:
        raise InvalidInputError(f"window is bound to {w.dims}, not {tuple(dims)}")
    w1 = _hankel_weights(w.n_x, w.l_x)
    w2 = _hankel_weights(w.n_y, w.l_y)
    return Image2D(values=np.outer(w1, w2).astype(np.float64))


def frobenius_norm_sq(img: Image2D, w: EmbeddingWindow) -> float:
    """||X||_F^2 of the trajectory matrix without building it"""
    return float(np.sum(pixel_weights(w).values * img.values ** 2))


def hankelize(
    terms: Iterable[RankOneTerm],
    w: EmbeddingWindow,
    dims: Tuple[int, int] = None,
) -> Image2D:
    """Project sum(sigma * u v^T) onto HbH structure (two-step diagonal averaging).

    Each pixel receives the mean of all matrix entries mapping to it; the sum over
    entries of one rank-one term is the full 2D convolution of its reshaped
    singular vectors, accumulated in the frequency domain.
    """
    if dims is not None and tuple(dims) != w.dims:
        raise InvalidInputError(f"window is bound to {w.dims}, not {tuple(dims)}")
    pad = _padded_dims(w.dims)
    accumulated = None

    for sigma, u, v in terms:
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        if u.shape != (w.l_x * w.l_y,) or v.shape != (w.k_x * w.k_y,):
            raise InvalidInputError(
                f"term vectors of shape {u.shape}, {v.shape} do not match window {w.shape}"
            )
        u_block = np.reshape(u, (w.l_x, w.l_y), order="F")
        v_block = np.reshape(v, (w.k_x, w.k_y), order="F")
        contribution = sigma * fft.rfft2(u_block, s=pad) * fft.rfft2(v_block, s=pad)
        accumulated = contribution if accumulated is None else accumulated + contribution

    if accumulated is None:
        return Image2D.zeros(w.dims)
    sums = fft.irfft2(accumulated, s=pad)[: w.n_x, : w.n_y]
    return Image2D(values=sums / pixel_weights(w).values)


def embed_terms(sigmas: Sequence[float], u: np.ndarray, v: np.ndarray) -> Iterable[RankOneTerm]:
    """Iterate (sigma, u_i, v_i) over the columns of u and v"""
    for index, sigma in enumerate(sigmas):
        yield float(sigma), u[:, index], v[:, index]
