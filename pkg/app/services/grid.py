import logging
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel, ConfigDict, field_validator

from app.errors import ImageIOError, InvalidInputError
from app.models import ImageFormat

logger = logging.getLogger(__name__)

_PNG16_MODES = {"I;16", "I;16B", "I;16L", "I"}
_PNG16_MAX = 65535


def _frozen_array(value, ndim: int) -> np.ndarray:
    array = np.array(value, dtype=np.float64)
    if array.ndim != ndim:
        raise ValueError(f"expected a {ndim}D array, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise ValueError("values must be finite")
    array.flags.writeable = False
    return array


class Image2D(BaseModel):
    """Dense real raster x(n, m); n indexes rows, m indexes columns"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    values: np.ndarray

    @field_validator("values", mode="before")
    @classmethod
    def _coerce(cls, value) -> np.ndarray:
        array = _frozen_array(value, 2)
        if array.shape[0] < 1 or array.shape[1] < 1:
            raise ValueError("an image needs at least one row and one column")
        return array

    @classmethod
    def zeros(cls, dims: Tuple[int, int]) -> "Image2D":
        return cls(values=np.zeros(dims))

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def dims(self) -> Tuple[int, int]:
        return (self.rows, self.cols)


class Series1D(BaseModel):
    """Real series, treated as an N x 1 column when it enters 2D routines"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    values: np.ndarray

    @field_validator("values", mode="before")
    @classmethod
    def _coerce(cls, value) -> np.ndarray:
        array = _frozen_array(value, 1)
        if array.shape[0] < 2:
            raise ValueError("a series needs at least two samples")
        return array

    @property
    def length(self) -> int:
        return self.values.shape[0]

    def as_column(self) -> Image2D:
        return Image2D(values=self.values[:, None])


def load_image(path: Union[str, Path], format: ImageFormat) -> Image2D:
    """Read an image; PNG codes are scaled to [0, 1], CSV is taken verbatim"""
    path = Path(path)
    if not path.is_file():
        raise ImageIOError(f"Image file not found: {path}")

    if format is ImageFormat.CSV:
        try:
            values = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
        except ValueError as e:
            raise ImageIOError(f"Malformed csv matrix in {path}: {e}") from e
    else:
        try:
            with Image.open(path) as im:
                mode = im.mode
                codes = np.asarray(im)
        except (UnidentifiedImageError, OSError) as e:
            raise ImageIOError(f"Unreadable png {path}: {e}") from e

        if format is ImageFormat.PNG8:
            if mode != "L":
                raise ImageIOError(f"{path} is not an 8-bit grayscale png (mode {mode})")
            values = codes.astype(np.float64) / 255.0
        else:
            if mode not in _PNG16_MODES:
                raise ImageIOError(f"{path} is not a 16-bit grayscale png (mode {mode})")
            values = codes.astype(np.float64) / _PNG16_MAX

    try:
        image = Image2D(values=values)
    except ValueError as e:
        raise ImageIOError(f"Invalid image content in {path}: {e}") from e
    logger.debug(f"📖 Loaded {path} ({image.rows}x{image.cols}, {format.value})")
    return image


def png16_codes(img: Image2D) -> np.ndarray:
    """Affine map onto the full 16-bit code range; a constant image maps to 0"""
    low, high = img.values.min(), img.values.max()
    span = high - low
    if span == 0:
        span = 1.0
    return np.rint((img.values - low) / span * _PNG16_MAX).astype(np.uint16)


def save_image(img: Image2D, path: Union[str, Path], format: ImageFormat) -> None:
    path = Path(path)
    try:
        if format is ImageFormat.CSV:
            np.savetxt(path, img.values, delimiter=",", fmt="%.17g", newline="\n")
        elif format is ImageFormat.PNG16:
            Image.fromarray(png16_codes(img)).save(path, format="PNG")
        else:
            raise InvalidInputError(f"Images cannot be saved as {format.value}")
    except OSError as e:
        raise ImageIOError(f"Cannot write {path}: {e}") from e


def log_transform(img: Image2D, floor: float) -> Image2D:
    """Elementwise ln(max(x, floor))"""
    if not floor > 0:
        raise InvalidInputError(f"floor must be positive, got {floor}")
    return Image2D(values=np.log(np.maximum(img.values, floor)))
