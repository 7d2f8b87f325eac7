import math
import re
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from app.errors import InvalidInputError


def wrap_phase(phi: float) -> float:
    """Map an angle onto (-pi, pi]; angles already in range are returned as they are"""
    if -math.pi < phi <= math.pi:
        return phi
    return math.pi - (math.pi - phi) % (2 * math.pi)


class Axis(str, Enum):
    """Image axis: ROW moves along the row index n, COL along the column index m"""
    ROW = "row"
    COL = "col"

    @property
    def other(self) -> "Axis":
        return Axis.COL if self is Axis.ROW else Axis.ROW


class ImageFormat(str, Enum):
    PNG8 = "png8"
    PNG16 = "png16"
    CSV = "csv"


class DecompositionMode(str, Enum):
    ADDITIVE = "additive"
    MULTIPLICATIVE = "multiplicative"


class Aggregate(str, Enum):
    MAX = "max"
    MEDIAN = "median"


class EmbeddingWindow(BaseModel):
    """2D-SSA window (L_x, L_y) bound to image dimensions (N_x, N_y)"""
    model_config = ConfigDict(frozen=True)

    l_x: int = Field(..., ge=1)
    l_y: int = Field(..., ge=1)
    n_x: int = Field(..., ge=1)
    n_y: int = Field(..., ge=1)

    @model_validator(mode="after")
    def _check_constraints(self) -> "EmbeddingWindow":
        if self.l_x > self.n_x or self.l_y > self.n_y:
            raise ValueError(
                f"window ({self.l_x}, {self.l_y}) exceeds image ({self.n_x}, {self.n_y})"
            )
        if not 1 < self.l_x * self.l_y < self.n_x * self.n_y:
            raise ValueError(
                f"window ({self.l_x}, {self.l_y}) violates 1 < L_x*L_y < N_x*N_y "
                f"for image ({self.n_x}, {self.n_y})"
            )
        return self

    @classmethod
    def create(cls, l_x: int, l_y: int, dims: Tuple[int, int]) -> "EmbeddingWindow":
        try:
            return cls(l_x=l_x, l_y=l_y, n_x=dims[0], n_y=dims[1])
        except ValidationError as e:
            raise InvalidInputError(f"Invalid embedding window: {e.errors()[0]['msg']}") from e

    @classmethod
    def half(cls, dims: Tuple[int, int]) -> "EmbeddingWindow":
        """Default window: approximately half of each image dimension"""
        return cls.create(math.ceil(dims[0] / 2), math.ceil(dims[1] / 2), dims)

    @property
    def k_x(self) -> int:
        return self.n_x - self.l_x + 1

    @property
    def k_y(self) -> int:
        return self.n_y - self.l_y + 1

    @property
    def dims(self) -> Tuple[int, int]:
        return (self.n_x, self.n_y)

    @property
    def shape(self) -> Tuple[int, int]:
        """Shape of the trajectory matrix, (L_x*L_y, K_x*K_y)"""
        return (self.l_x * self.l_y, self.k_x * self.k_y)


class SinusoidTerm(BaseModel):
    """s * rho_r**n * rho_c**m * cos(2*pi*(om_r*n + om_c*m) + phi)"""
    model_config = ConfigDict(frozen=True)

    s: float = Field(..., ge=0.0)
    rho_r: float = Field(1.0, gt=0.0)
    rho_c: float = Field(1.0, gt=0.0)
    om_r: float = Field(0.0, ge=-0.5, le=0.5)
    om_c: float = Field(0.0, ge=-0.5, le=0.5)
    phi: float = 0.0

    @field_validator("phi")
    @classmethod
    def _normalize_phase(cls, value: float) -> float:
        return wrap_phase(value)

    def rho(self, axis: Axis) -> float:
        return self.rho_r if axis is Axis.ROW else self.rho_c

    def om(self, axis: Axis) -> float:
        return self.om_r if axis is Axis.ROW else self.om_c


class ParametricModel2D(BaseModel):
    """Sum of damped 2D cosine terms; an empty model is the zero signal"""
    model_config = ConfigDict(frozen=True)

    terms: Tuple[SinusoidTerm, ...] = ()
    fit_rmse: float = Field(0.0, ge=0.0)

    def __len__(self) -> int:
        return len(self.terms)

    def __add__(self, other: "ParametricModel2D") -> "ParametricModel2D":
        return ParametricModel2D(terms=self.terms + other.terms)


class ComponentDescriptor(BaseModel):
    """Real component (damping and frequency per axis) recovered from ESPRIT poles"""
    model_config = ConfigDict(frozen=True)

    rho_r: float = Field(..., gt=0.0)
    rho_c: float = Field(1.0, gt=0.0)
    om_r: float = Field(0.0, ge=-0.5, le=0.5)
    om_c: float = Field(0.0, ge=-0.5, le=0.5)
    unpaired: bool = False

    def om(self, axis: Axis) -> float:
        return self.om_r if axis is Axis.ROW else self.om_c


class PoleEstimate(BaseModel):
    """Complex pole per row step (and per column step for 2D estimates)"""
    model_config = ConfigDict(frozen=True)

    z_r: complex
    z_c: Optional[complex] = None

    @property
    def rho_r(self) -> float:
        return abs(self.z_r)

    @property
    def om_r(self) -> float:
        return math.atan2(self.z_r.imag, self.z_r.real) / (2 * math.pi)

    @property
    def rho_c(self) -> float:
        return 1.0 if self.z_c is None else abs(self.z_c)

    @property
    def om_c(self) -> float:
        return 0.0 if self.z_c is None else math.atan2(self.z_c.imag, self.z_c.real) / (2 * math.pi)


class LineSet(BaseModel):
    """Interconnection lines as polylines of sub-pixel (row, col) points"""
    model_config = ConfigDict(frozen=True)

    lines: List[List[Tuple[float, float]]] = Field(default_factory=list)
    cell_axis: Axis = Axis.ROW

    def records(self) -> List[Tuple[int, float, float]]:
        """Flatten into (line, level, coordinate) records"""
        coord = 0 if self.cell_axis is Axis.ROW else 1
        return [
            (index, point[1 - coord], point[coord])
            for index, line in enumerate(self.lines)
            for point in line
        ]


class Defect(BaseModel):
    center: Tuple[float, float]
    radius: float = Field(..., gt=0.0)
    depth: float


class ElSynthSpec(BaseModel):
    """Ground-truth recipe for a synthetic EL-like image"""
    dims: Tuple[int, int]
    n_cells: int = Field(..., ge=1)
    cell_period: float = Field(..., gt=0.0)
    cell_axis: Axis = Axis.ROW
    cell_amplitude: float = 0.3
    harmonics: Tuple[float, ...] = (1.0, 0.3, 0.1)
    harmonic_phases: Tuple[float, ...] = (0.0, 0.8, 1.6)
    offset: float = 1.0
    trend_terms: Tuple[SinusoidTerm, ...] = ()
    trend_poly: Tuple[Tuple[float, ...], ...] = ()
    defects: Tuple[Defect, ...] = ()
    noise_sigma: float = Field(0.0, ge=0.0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_cell_layout(self) -> "ElSynthSpec":
        extent = self.dims[0] if self.cell_axis is Axis.ROW else self.dims[1]
        span = self.cell_period * self.n_cells
        if not 0.75 * extent <= span <= 1.05 * extent:
            raise ValueError(
                f"cells span {span:g} px but the image extent along {self.cell_axis.value} is {extent}"
            )
        if len(self.harmonic_phases) < len(self.harmonics):
            raise ValueError("one phase per harmonic is required")
        return self


_WINDOW_PATTERN = re.compile(r"^(\d+)x(\d+)$")


class RunConfig(BaseModel):
    """Fully validated configuration of one CLI invocation"""
    subcommand: str
    inputs: List[Path] = Field(default_factory=list)
    input_format: ImageFormat = ImageFormat.CSV
    output_dir: Path = Path(".")
    output_format: ImageFormat = ImageFormat.CSV
    model_path: Optional[Path] = None
    dims: Optional[Tuple[int, int]] = None
    window: str = "auto"
    k: int = Field(50, ge=1)
    n_cells: int = Field(150, ge=1)
    cell_axis: Axis = Axis.ROW
    mode: DecompositionMode = DecompositionMode.ADDITIVE
    refine: int = Field(4, ge=1)
    direction: Axis = Axis.COL
    slice_axis: Axis = Axis.ROW
    mssa_window: Optional[int] = Field(None, ge=2)
    mssa_k: int = Field(20, ge=1)
    cell_band: Optional[Tuple[float, float]] = None
    band_margin: float = Field(0.3, ge=0.0, lt=1.0)
    aggregate: Aggregate = Aggregate.MAX
    rows: Optional[Tuple[int, int]] = None
    c: Optional[float] = Field(None, gt=0.0)
    c0: Optional[float] = Field(None, gt=0.0)
    temperature: Optional[float] = Field(None, gt=0.0)
    log_domain: bool = False
    per_cell: bool = False
    cell_rank: int = Field(3, ge=1)
    seed: int = 0
    threads: int = Field(1, ge=1)

    @field_validator("dims")
    @classmethod
    def _check_dims(cls, value: Optional[Tuple[int, int]]) -> Optional[Tuple[int, int]]:
        if value is not None and min(value) < 1:
            raise ValueError("dims must be positive")
        return value

    @field_validator("rows")
    @classmethod
    def _check_rows(cls, value: Optional[Tuple[int, int]]) -> Optional[Tuple[int, int]]:
        if value is not None and not 0 <= value[0] < value[1]:
            raise ValueError("rows must be a range start:stop with 0 <= start < stop")
        return value

    @field_validator("window")
    @classmethod
    def _check_window(cls, value: str) -> str:
        if value != "auto" and not _WINDOW_PATTERN.match(value):
            raise ValueError("window must be 'auto' or 'LXxLY', e.g. '50x40'")
        return value

    @field_validator("cell_band")
    @classmethod
    def _check_band(cls, value: Optional[Tuple[float, float]]) -> Optional[Tuple[float, float]]:
        if value is not None and not 0.0 < value[0] < value[1] < 0.5:
            raise ValueError("cell band must satisfy 0 < f_lo < f_hi < 0.5")
        return value

    @field_validator("output_format")
    @classmethod
    def _check_output_format(cls, value: ImageFormat) -> ImageFormat:
        if value is ImageFormat.PNG8:
            raise ValueError("images are exported as csv or png16")
        return value

    def resolve_window(self, dims: Tuple[int, int]) -> EmbeddingWindow:
        """'auto' resolves to (ceil(N_x/2), ceil(N_y/2))"""
        if self.window == "auto":
            return EmbeddingWindow.half(dims)
        l_x, l_y = (int(part) for part in _WINDOW_PATTERN.match(self.window).groups())
        return EmbeddingWindow.create(l_x, l_y, dims)

    def resolve_band(self, extent: int) -> Tuple[float, float]:
        """Explicit band, or the cell frequency n_cells/extent widened by band_margin"""
        if self.cell_band is not None:
            return self.cell_band
        f0 = self.n_cells / extent
        low, high = f0 * (1.0 - self.band_margin), min(f0 * (1.0 + self.band_margin), 0.5)
        if not 0.0 < low < high:
            raise InvalidInputError(f"derived cell band ({low:g}, {high:g}) is empty")
        return (low, high)


class TermRow(BaseModel):
    """Report line for one fitted term"""
    group: str
    s: float
    rho_r: float
    rho_c: float
    om_r: float
    om_c: float
    phi: float


class DecompositionReport(BaseModel):
    source: str
    dims: Tuple[int, int]
    window: Tuple[int, int]
    k: int
    n_triples: int
    mode: DecompositionMode
    cell_axis: Axis
    n_cells: int
    threshold: float
    fit_rmse: float
    energy_fractions: List[float]
    triples_for_999: int
    terms: List[TermRow]

    def to_text(self) -> str:
        lines = [
            f"source: {self.source}",
            f"dims: {self.dims[0]}x{self.dims[1]}",
            f"window: {self.window[0]}x{self.window[1]}",
            f"k: {self.k}",
            f"triples: {self.n_triples}",
            f"mode: {self.mode.value}",
            f"cell_axis: {self.cell_axis.value}",
            f"n_cells: {self.n_cells}",
            f"threshold: {self.threshold:.6g}",
            f"fit_rmse: {self.fit_rmse:.6g}",
            f"triples_for_99.9%: {self.triples_for_999}",
            "",
            "energy:",
            "  index  fraction    cumulative",
        ]
        cumulative = 0.0
        for index, fraction in enumerate(self.energy_fractions):
            cumulative += fraction
            lines.append(f"  {index:5d}  {fraction:10.6f}  {cumulative:10.6f}")
        lines += ["", "terms:", "  group   s             rho_r       rho_c       om_r        om_c        phi"]
        for row in self.terms:
            lines.append(
                f"  {row.group:6s}  {row.s:12.6g}  {row.rho_r:10.6f}  {row.rho_c:10.6f}  "
                f"{row.om_r:10.6f}  {row.om_c:10.6f}  {row.phi:10.6f}"
            )
        return "\n".join(lines) + "\n"


class ShiftAccuracyReport(BaseModel):
    shift: float
    repeats: int
    rmse: float
    mean: float
    q25: float
    q75: float
    estimates: List[float]

    def to_text(self) -> str:
        return (
            f"shift: {self.shift:g}\n"
            f"repeats: {self.repeats}\n"
            f"rmse: {self.rmse:.4f}\n"
            f"mean: {self.mean:.4f}\n"
            f"q25: {self.q25:.4f}\n"
            f"q75: {self.q75:.4f}\n"
        )


class SeriesPairTruth(BaseModel):
    """Generation parameters of an s1/s2 pair; the period-20 and period-30 parts of s2 lead s1 by ``shift``"""
    shift: float
    n: int
    seed: int
    noise_sigma: float
    shifted_periods: Tuple[float, float] = (20.0, 30.0)


class CharLengthTruth(BaseModel):
    """Generation parameters of a cosh voltage profile image I = c exp(c0 V)"""
    lambda0: float
    cell_width: int
    n_cells: int
    c: float
    c0: float
    v_edge: float
    n_rows: int


class BenchRow(BaseModel):
    size: int
    seconds: float
    peak_mib: float
    matvec_seconds: float = 0.0


class DiffBenchRow(BaseModel):
    n_terms: int
    seconds: float


class BenchReport(BaseModel):
    k: int
    rows: List[BenchRow]
    ratios: List[float]
    subquadratic: bool
    matvec_ratios: List[float] = Field(default_factory=list)
    n_log_n: bool = True
    differentiation: List[DiffBenchRow] = Field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"k: {self.k}", "", "  size   seconds     matvec_ms   peak_MiB"]
        for row in self.rows:
            lines.append(f"  {row.size:5d}  {row.seconds:10.4f}  {row.matvec_seconds * 1e3:10.3f}  {row.peak_mib:10.2f}")
        lines.append("")
        lines.append("doubling ratios: " + ", ".join(f"{r:.2f}" for r in self.ratios))
        lines.append(f"subquadratic: {self.subquadratic}")
        lines.append("matvec doubling ratios: " + ", ".join(f"{r:.2f}" for r in self.matvec_ratios))
        lines.append(f"n_log_n: {self.n_log_n}")
        if self.differentiation:
            lines += ["", "  terms  seconds"]
            for row in self.differentiation:
                lines.append(f"  {row.n_terms:5d}  {row.seconds:10.4f}")
        return "\n".join(lines) + "\n"
