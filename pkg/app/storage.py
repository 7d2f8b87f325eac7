import json
import logging
import os
import shutil
import tempfile
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import yaml
from pydantic import BaseModel, Field, ValidationError

from app.errors import ImageIOError
from app.models import DecompositionMode, ImageFormat, LineSet, ParametricModel2D, SinusoidTerm
from app.services.grid import Image2D, save_image

logger = logging.getLogger(__name__)


class TermRecord(SinusoidTerm):
    """A model term tagged with its group (G or S)"""
    group: str = "G"


class ModelDocument(BaseModel):
    """On-disk form of a fitted model"""
    mode: DecompositionMode = DecompositionMode.ADDITIVE
    fit_rmse: float = Field(0.0, ge=0.0)
    terms: List[TermRecord] = Field(default_factory=list)

    @classmethod
    def from_groups(cls, groups: dict, mode: DecompositionMode = DecompositionMode.ADDITIVE, fit_rmse: float = 0.0):
        """Build from {"G": model_G, "S": model_S}"""
        terms = [
            TermRecord(group=group, **term.model_dump())
            for group, model in groups.items()
            for term in model.terms
        ]
        return cls(mode=mode, fit_rmse=fit_rmse, terms=terms)

    def model(self, groups: Optional[Sequence[str]] = None) -> ParametricModel2D:
        selected = [t for t in self.terms if groups is None or t.group in groups]
        return ParametricModel2D(
            terms=tuple(SinusoidTerm(**t.model_dump(exclude={"group"})) for t in selected),
            fit_rmse=self.fit_rmse,
        )


def _float_text(value: float) -> str:
    text = f"{value:.17g}"
    mantissa, _, exponent = text.partition("e")
    if "." not in mantissa and mantissa.lstrip("-").isdigit():
        mantissa += ".0"
    return mantissa + ("e" + exponent if exponent else "")


class _ModelDumper(yaml.SafeDumper):
    pass


_ModelDumper.add_representer(
    float, lambda dumper, value: dumper.represent_scalar("tag:yaml.org,2002:float", _float_text(value))
)


def dump_model(document: ModelDocument) -> str:
    return yaml.dump(
        json.loads(document.model_dump_json()), Dumper=_ModelDumper, sort_keys=False, default_flow_style=False
    )


def load_model(path: Union[str, Path]) -> ModelDocument:
    """Read and validate a model document"""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as e:
        raise ImageIOError(f"Cannot read model document {path}: {e}") from e
    try:
        return ModelDocument.model_validate(raw or {})
    except ValidationError as e:
        raise ImageIOError(f"Invalid model document {path}: {e.errors()[0]['msg']}") from e


class ArtifactStore:
    """
    Output writer for one command run

    Files are staged in a hidden directory next to ``out_dir`` and moved into
    place by ``commit()``; a run that fails before committing leaves ``out_dir``
    untouched.
    """

    def __init__(self, out_dir: Union[str, Path]):
        self.out_dir = Path(out_dir)
        parent = self.out_dir.resolve().parent
        try:
            parent.mkdir(parents=True, exist_ok=True)
            self.staging = Path(tempfile.mkdtemp(prefix=f".{self.out_dir.name or 'out'}-", dir=parent))
        except OSError as e:
            raise ImageIOError(f"Cannot prepare output directory {self.out_dir}: {e}") from e
        self.names: List[str] = []

    def __enter__(self) -> "ArtifactStore":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.discard()

    def _path(self, name: str) -> Path:
        if name not in self.names:
            self.names.append(name)
        return self.staging / name

    def write_image(self, name: str, img: Image2D, format: ImageFormat = ImageFormat.CSV) -> None:
        save_image(img, self._path(name), format)

    def write_model(self, name: str, document: ModelDocument) -> None:
        self.write_text(name, dump_model(document))

    def write_lines(self, name: str, lines: LineSet) -> None:
        self.write_table(name, lines.records(), ["line", "level", "coordinate"], ["%d", "%.17g", "%.17g"])

    def write_table(self, name: str, rows: Sequence[Sequence[float]], columns: Sequence[str], fmt: Sequence[str]) -> None:
        array = np.array(rows, dtype=np.float64).reshape(-1, len(columns))
        self._savetxt(name, array, fmt=list(fmt), header=",".join(columns))

    def write_vector(self, name: str, values: Sequence[float]) -> None:
        self._savetxt(name, np.asarray(values, dtype=np.float64).reshape(-1, 1), fmt="%.17g")

    def write_mask(self, name: str, mask: np.ndarray) -> None:
        self._savetxt(name, np.asarray(mask, dtype=np.uint8), fmt="%d")

    def write_text(self, name: str, text: str) -> None:
        try:
            self._path(name).write_text(text, encoding="utf-8")
        except OSError as e:
            raise ImageIOError(f"Cannot write {name}: {e}") from e

    def write_json(self, name: str, report: BaseModel) -> None:
        self.write_text(name, report.model_dump_json(indent=2) + "\n")

    def _savetxt(self, name: str, array: np.ndarray, fmt, header: str = "") -> None:
        try:
            np.savetxt(self._path(name), array, delimiter=",", fmt=fmt, header=header, comments="", newline="\n")
        except OSError as e:
            raise ImageIOError(f"Cannot write {name}: {e}") from e

    def commit(self) -> List[Path]:
        """Move every staged artifact into ``out_dir``"""
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            written = []
            for name in self.names:
                target = self.out_dir / name
                os.replace(self.staging / name, target)
                written.append(target)
        except OSError as e:
            raise ImageIOError(f"Cannot commit outputs to {self.out_dir}: {e}") from e
        finally:
            self.discard()
        logger.info(f"✅ Wrote {len(written)} artifacts to {self.out_dir}")
        return written

    def discard(self) -> None:
        shutil.rmtree(self.staging, ignore_errors=True)
