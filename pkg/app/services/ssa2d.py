import logging
from enum import Enum
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict
from scipy import linalg

from app.config import settings
from app.errors import InvalidInputError
from app.models import ComponentDescriptor, EmbeddingWindow, ParametricModel2D
from app.services.grid import Image2D, Series1D
from app.services.hankel import embed_terms, frobenius_norm_sq, hankelize, make_operator
from app.services.lowrank import RANK_CUTOFF, SvdTruncation, energy_fractions, truncated_svd
from app.services.sigmodel import fit_amplitude_phase

logger = logging.getLogger(__name__)


class Channel(str, Enum):
    FIRST = "first"
    SECOND = "second"


class Ssa2dDecomposition(BaseModel):
    """Source image, its window and the leading singular triples of its HbH matrix"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    source: Image2D
    window: EmbeddingWindow
    truncation: SvdTruncation

    def __len__(self) -> int:
        return len(self.truncation)

    @property
    def sigmas(self) -> np.ndarray:
        return self.truncation.sigmas

    def basis(self, count: int = None) -> np.ndarray:
        """Leading left singular vectors (the signal subspace)"""
        count = len(self) if count is None else count
        return self.truncation.u[:, :count]

    def energy_fractions(self) -> np.ndarray:
        return energy_fractions(self.truncation, frobenius_norm_sq(self.source, self.window))


class MssaDecomposition(BaseModel):
    """Two equal-length channels sharing one left singular subspace of length-L windows"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    channels: Tuple[Series1D, Series1D]
    L: int
    truncation: SvdTruncation

    def __len__(self) -> int:
        return len(self.truncation)

    @property
    def length(self) -> int:
        return self.channels[0].length

    @property
    def K(self) -> int:
        return self.length - self.L + 1

    @property
    def sigmas(self) -> np.ndarray:
        return self.truncation.sigmas

    def basis(self, count: int = None) -> np.ndarray:
        count = len(self) if count is None else count
        return self.truncation.u[:, :count]


def decompose_2d(
    img: Image2D,
    w: Optional[EmbeddingWindow] = None,
    k: int = None,
    tol: float = None,
    seed: int = None,
) -> Ssa2dDecomposition:
    """Embed and factor: the first two SSA steps on an image"""
    w = EmbeddingWindow.half(img.dims) if w is None else w
    k = settings.default_k if k is None else k
    if k < 1:
        raise InvalidInputError(f"k must be positive, got {k}")
    limit = min(w.shape) - 1
    if k > limit:
        logger.warning(f"⚠️ k={k} reduced to {limit} for a {w.shape[0]}x{w.shape[1]} trajectory matrix")
        k = limit

    op = make_operator(img, w)
    truncation = truncated_svd(op, k, tol=tol, seed=seed)
    logger.info(
        f"✅ 2D-SSA of {img.rows}x{img.cols} with window {w.l_x}x{w.l_y}: {len(truncation)} triples"
    )
    return Ssa2dDecomposition(source=img, window=w, truncation=truncation)


def reconstruct(d: Ssa2dDecomposition, indices: Iterable[int]) -> Image2D:
    """Hankelized sum of the selected (0-based) triples"""
    selected = sorted(set(int(i) for i in indices))
    if selected and (selected[0] < 0 or selected[-1] >= len(d)):
        raise InvalidInputError(f"triple indices {selected} outside 0..{len(d) - 1}")
    t = d.truncation
    return hankelize(embed_terms(t.sigmas[selected], t.u[:, selected], t.v[:, selected]), d.window)


def trajectory_1d(series: Series1D, L: int) -> np.ndarray:
    """L x (N - L + 1) Hankel matrix, H[i, j] = x[i + j]"""
    return sliding_window_view(series.values, L).T


def decompose_mssa(a: Series1D, b: Series1D, L: int = None, k: int = None) -> MssaDecomposition:
    """SVD of the stacked trajectory matrix [H(a) : H(b)]"""
    if a.length != b.length:
        raise InvalidInputError(f"channel lengths differ: {a.length} vs {b.length}")
    L = a.length // 2 if L is None else L
    k = settings.mssa_k if k is None else k
    if not 2 <= L <= a.length - 1:
        raise InvalidInputError(f"window {L} outside 2..{a.length - 1}")

    stacked = np.hstack([trajectory_1d(a, L), trajectory_1d(b, L)])
    U, sigmas, Vt = linalg.svd(stacked, full_matrices=False)
    count = 0
    if sigmas.size and sigmas[0] > 0:
        count = min(k, int(np.sum(sigmas > RANK_CUTOFF * sigmas[0])))
    truncation = SvdTruncation(
        sigmas=sigmas[:count].copy(),
        u=U[:, :count].copy(),
        v=Vt[:count].T.copy(),
    )
    return MssaDecomposition(channels=(a, b), L=L, truncation=truncation)


def reconstruct_channel(d: MssaDecomposition, channel: Channel, count: int = None) -> Series1D:
    """Diagonal-averaged series of one channel from the leading ``count`` triples"""
    count = len(d) if count is None else count
    offset = 0 if Channel(channel) is Channel.FIRST else d.K
    t = d.truncation
    window = EmbeddingWindow.create(d.L, 1, (d.length, 1))
    image = hankelize(
        embed_terms(t.sigmas[:count], t.u[:, :count], t.v[offset : offset + d.K, :count]),
        window,
    )
    return Series1D(values=image.values[:, 0])


def channel_model(
    d: MssaDecomposition,
    channel: Channel,
    components: Sequence[ComponentDescriptor],
    count: int = None,
) -> ParametricModel2D:
    """Per-channel amplitudes and phases for frequencies shared by both channels.

    The series is indexed from 0 along the row axis, so the model is an N x 1 image model.
    """
    series = reconstruct_channel(d, channel, count)
    return fit_amplitude_phase(components, series.as_column())
