import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator

import click
import numpy as np
from pydantic import ValidationError

from app.config import settings
from app.errors import ElssaError, NumericalError
from app.models import (
    Aggregate,
    Axis,
    CharLengthTruth,
    DecompositionMode,
    DecompositionReport,
    ElSynthSpec,
    ImageFormat,
    ParametricModel2D,
    RunConfig,
    SeriesPairTruth,
    SinusoidTerm,
    TermRow,
)
from app.services.bench import run_bench
from app.services.elproc import (
    CELL_RANK,
    apply_displacement,
    cell_char_length,
    char_length,
    detect_lines,
    el_decompose,
    image_poles,
    stitch_displacement,
    thermal_c0,
)
from app.services.esprit import max_components, merge_conjugates, pole_table, select_rank
from app.services.grid import Image2D, load_image
from app.services.lowrank import triples_for_energy
from app.services.ssa2d import decompose_2d
from app.services.synth import charlen_voltage, gen_charlen_profile, gen_cosine2d, gen_el_like, gen_s1_s2
from app.storage import ArtifactStore, ModelDocument, load_model

logger = logging.getLogger(__name__)

router = click.Group(name="commands")

EXIT_USAGE = 1
EXIT_NUMERICAL = 2


class CommandError(click.ClickException):
    """Diagnostic shown to the user, with the process exit code it maps to"""

    def __init__(self, message: str, exit_code: int = EXIT_USAGE):
        super().__init__(message)
        self.exit_code = exit_code


class Pair(click.ParamType):
    """Two values joined by a separator, e.g. 64x48, 3:10 or 0.05,0.1"""

    name = "pair"

    def __init__(self, separator: str, cast=int):
        self.separator = separator
        self.cast = cast

    def convert(self, value, param, ctx):
        if isinstance(value, tuple):
            return value
        parts = str(value).split(self.separator)
        try:
            if len(parts) != 2:
                raise ValueError
            return (self.cast(parts[0]), self.cast(parts[1]))
        except ValueError:
            self.fail(f"expected two values separated by '{self.separator}', got {value!r}", param, ctx)


def _choice(enum) -> click.Choice:
    return click.Choice([member.value for member in enum])


def _first_error(error: ValidationError) -> str:
    detail = error.errors()[0]
    location = ".".join(str(part) for part in detail["loc"])
    return f"{location}: {detail['msg']}" if location else detail["msg"]


def build_config(subcommand: str, **fields) -> RunConfig:
    """Validate every option before anything is read or written"""
    try:
        return RunConfig(subcommand=subcommand, **{key: value for key, value in fields.items() if value is not None})
    except ValidationError as e:
        raise CommandError(f"Invalid {subcommand} options: {_first_error(e)}") from e


@contextmanager
def handled(action: str) -> Iterator[None]:
    """Turn pipeline failures into a CommandError with the matching exit code"""
    try:
        yield
    except CommandError:
        raise
    except (NumericalError, np.linalg.LinAlgError) as e:
        raise CommandError(f"Failed to {action}: {e}", EXIT_NUMERICAL) from e
    except ValidationError as e:
        raise CommandError(f"Failed to {action}: {_first_error(e)}") from e
    except (ElssaError, OSError, ValueError) as e:
        raise CommandError(f"Failed to {action}: {e}") from e
    except Exception as e:
        raise CommandError(f"Failed to {action}: {str(e)}", EXIT_NUMERICAL) from e


def _extension(fmt: ImageFormat) -> str:
    return "csv" if fmt is ImageFormat.CSV else "png"


input_option = click.option("--input", "input_path", type=click.Path(path_type=Path), help="Input image")
input_format_option = click.option("--input-format", type=_choice(ImageFormat), default="csv", show_default=True)
output_dir_option = click.option("--output-dir", type=click.Path(path_type=Path), default=Path("."), show_default=True)
output_format_option = click.option(
    "--output-format", type=click.Choice(["csv", "png16"]), default="csv", show_default=True
)
window_option = click.option("--window", default="auto", show_default=True, help="'auto' or LXxLY")
k_option = click.option("--k", type=int, default=settings.default_k, show_default=True, help="Triples to compute")
n_cells_option = click.option("--n-cells", type=int, default=settings.n_cells, show_default=True)
cell_axis_option = click.option("--cell-axis", type=_choice(Axis), default="row", show_default=True)
mode_option = click.option("--mode", type=_choice(DecompositionMode), default="additive", show_default=True)
seed_option = click.option("--seed", type=int, default=settings.lanczos_seed, show_default=True)


def _decompose_input(cfg: RunConfig):
    img = load_image(cfg.inputs[0], cfg.input_format)
    result = el_decompose(
        img, cfg.n_cells, cfg.cell_axis, cfg.k, cfg.mode, window=cfg.resolve_window(img.dims), seed=cfg.seed
    )
    return img, result


def _require_input(cfg: RunConfig) -> None:
    if not cfg.inputs:
        raise CommandError(f"{cfg.subcommand} needs --input")


@router.command("decompose")
@input_option
@input_format_option
@output_dir_option
@output_format_option
@window_option
@k_option
@n_cells_option
@cell_axis_option
@mode_option
@seed_option
def decompose(input_path, input_format, output_dir, output_format, window, k, n_cells, cell_axis, mode, seed):
    """
    Split an EL image into global intensity G, cell pattern S and remainder R

    Writes G, S and R images, model.yaml and report.txt / report.json.
    """
    cfg = build_config(
        "decompose", inputs=[input_path] if input_path else None, input_format=input_format,
        output_dir=output_dir, output_format=output_format, window=window, k=k, n_cells=n_cells,
        cell_axis=cell_axis, mode=mode, seed=seed,
    )
    _require_input(cfg)
    with handled("decompose image"):
        img, result = _decompose_input(cfg)
        fractions = list(result.energy_fractions)
        report = DecompositionReport(
            source=str(cfg.inputs[0]),
            dims=img.dims,
            window=(result.window.l_x, result.window.l_y),
            k=cfg.k,
            n_triples=result.n_triples,
            mode=cfg.mode,
            cell_axis=cfg.cell_axis,
            n_cells=cfg.n_cells,
            threshold=result.threshold,
            fit_rmse=result.model.fit_rmse,
            energy_fractions=fractions,
            triples_for_999=triples_for_energy(np.array(fractions)),
            terms=[
                TermRow(group=group, **term.model_dump())
                for group, model in (("G", result.model_G), ("S", result.model_S))
                for term in model.terms
            ],
        )
        ext = _extension(cfg.output_format)
        with ArtifactStore(cfg.output_dir) as store:
            store.write_image(f"G.{ext}", result.G, cfg.output_format)
            store.write_image(f"S.{ext}", result.S, cfg.output_format)
            store.write_image(f"R.{ext}", result.R, cfg.output_format)
            store.write_model(
                "model.yaml",
                ModelDocument.from_groups(
                    {"G": result.model_G, "S": result.model_S}, cfg.mode, result.model.fit_rmse
                ),
            )
            store.write_text("report.txt", report.to_text())
            store.write_json("report.json", report)
            store.commit()
    click.echo(report.to_text(), nl=False)


@router.command("esprit")
@input_option
@input_format_option
@output_dir_option
@window_option
@k_option
@seed_option
def esprit(input_path, input_format, output_dir, window, k, seed):
    """Write the damping/frequency table (poles.csv) of an image's signal subspace"""
    cfg = build_config(
        "esprit", inputs=[input_path] if input_path else None, input_format=input_format,
        output_dir=output_dir, window=window, k=k, seed=seed,
    )
    _require_input(cfg)
    with handled("estimate poles"):
        img = load_image(cfg.inputs[0], cfg.input_format)
        w = cfg.resolve_window(img.dims)
        ssa = decompose_2d(img, w, cfg.k, seed=cfg.seed)
        rank = min(select_rank(ssa.sigmas, cfg.k), max_components(w))
        rows = pole_table(merge_conjugates(image_poles(ssa.basis(rank), w))) if rank else []
        with ArtifactStore(cfg.output_dir) as store:
            store.write_table(
                "poles.csv", rows, ["rho_r", "rho_c", "om_r", "om_c", "unpaired"],
                ["%.17g", "%.17g", "%.17g", "%.17g", "%d"],
            )
            store.commit()
    click.echo(f"rank: {rank}\ncomponents: {len(rows)}")


@router.command("detect-lines")
@click.option("--model", "model_path", type=click.Path(path_type=Path), help="Model document from decompose")
@click.option("--dims", type=Pair("x"), help="Image size ROWSxCOLS when only --model is given")
@input_option
@input_format_option
@output_dir_option
@click.option("--refine", type=int, default=settings.refine, show_default=True)
@window_option
@k_option
@n_cells_option
@cell_axis_option
@mode_option
@seed_option
def detect_lines_command(model_path, dims, input_path, input_format, output_dir, refine, window, k, n_cells, cell_axis, mode, seed):
    """Locate interconnection lines as sub-pixel minima of the cell model (lines.csv)"""
    cfg = build_config(
        "detect-lines", model_path=model_path, dims=dims, inputs=[input_path] if input_path else None,
        input_format=input_format, output_dir=output_dir, refine=refine, window=window, k=k,
        n_cells=n_cells, cell_axis=cell_axis, mode=mode, seed=seed,
    )
    if cfg.model_path is None and not cfg.inputs:
        raise CommandError("detect-lines needs --model or --input")
    with handled("detect lines"):
        if cfg.model_path is not None:
            model_S = load_model(cfg.model_path).model(["S"])
            image_dims = cfg.dims or (load_image(cfg.inputs[0], cfg.input_format).dims if cfg.inputs else None)
            if image_dims is None:
                raise CommandError("detect-lines with --model needs --dims or --input")
        else:
            img, result = _decompose_input(cfg)
            model_S, image_dims = result.model_S, img.dims
        lines = detect_lines(model_S, image_dims, cfg.refine, cfg.cell_axis)
        with ArtifactStore(cfg.output_dir) as store:
            store.write_lines("lines.csv", lines)
            store.commit()
    click.echo(f"lines: {len(lines.lines)}\npoints: {sum(len(line) for line in lines.lines)}")


@router.command("charlen")
@click.option("--model", "model_path", type=click.Path(path_type=Path), help="Model document from decompose")
@click.option("--dims", type=Pair("x"))
@input_option
@input_format_option
@output_dir_option
@output_format_option
@click.option("--c", type=float, help="Intensity scale c of I = c exp(c0 V)")
@click.option("--c0", type=float, help="1/thermal voltage (1/V)")
@click.option("--temperature", type=float, help="Kelvin; sets c0 = q/(kT) when --c0 is absent")
@click.option("--direction", type=_choice(Axis), default="col", show_default=True)
@click.option("--log-domain", is_flag=True, help="The model describes ln I")
@click.option("--per-cell", is_flag=True, help="Decompose each of the --n-cells cells along --direction on its own")
@click.option("--cell-rank", type=int, default=CELL_RANK, show_default=True, help="Triples per cell with --per-cell")
@window_option
@k_option
@n_cells_option
@cell_axis_option
@mode_option
@seed_option
def charlen(model_path, dims, input_path, input_format, output_dir, output_format, c, c0, temperature, direction,
            log_domain, per_cell, cell_rank, window, k, n_cells, cell_axis, mode, seed):
    """Inverse characteristic length field from the smooth G + S intensity model"""
    cfg = build_config(
        "charlen", model_path=model_path, dims=dims, inputs=[input_path] if input_path else None,
        input_format=input_format, output_dir=output_dir, output_format=output_format, c=c, c0=c0,
        temperature=temperature, direction=direction, log_domain=log_domain, per_cell=per_cell,
        cell_rank=cell_rank, window=window, k=k, n_cells=n_cells, cell_axis=cell_axis, mode=mode, seed=seed,
    )
    if cfg.c is None:
        raise CommandError("charlen needs --c")
    if cfg.c0 is None and cfg.temperature is None:
        raise CommandError("charlen needs --c0 or --temperature")
    if cfg.model_path is None and not cfg.inputs:
        raise CommandError("charlen needs --model or --input")
    if cfg.per_cell and not cfg.inputs:
        raise CommandError("charlen --per-cell needs --input")

    with handled("estimate characteristic length"):
        scale = cfg.c0 if cfg.c0 is not None else thermal_c0(cfg.temperature)
        if cfg.per_cell:
            img = load_image(cfg.inputs[0], cfg.input_format)
            field = cell_char_length(
                img, cfg.n_cells, cfg.c, scale, cfg.direction, mode=cfg.mode, k=cfg.cell_rank, seed=cfg.seed
            )
        else:
            if cfg.model_path is not None:
                document = load_model(cfg.model_path)
                model = document.model()
                in_log = cfg.log_domain or document.mode is DecompositionMode.MULTIPLICATIVE
                image_dims = cfg.dims or (load_image(cfg.inputs[0], cfg.input_format).dims if cfg.inputs else None)
                if image_dims is None:
                    raise CommandError("charlen with --model needs --dims or --input")
            else:
                img, result = _decompose_input(cfg)
                model, image_dims = result.model, img.dims
                in_log = cfg.log_domain or cfg.mode is DecompositionMode.MULTIPLICATIVE
            field = char_length(model, image_dims, cfg.c, scale, cfg.direction, log_domain=in_log)
        lam = field.lambda_values()
        summary = (
            f"c0: {scale:.6g}\n"
            f"valid_pixels: {int(np.sum(~np.isnan(lam)))}\n"
            f"median_lambda: {float(np.nanmedian(lam)) if np.any(~np.isnan(lam)) else float('nan'):.6g}\n"
        )
        ext = _extension(cfg.output_format)
        with ArtifactStore(cfg.output_dir) as store:
            store.write_image(f"lambda_sq.{ext}", field.lambda_sq, cfg.output_format)
            store.write_image(f"voltage.{ext}", field.voltage, cfg.output_format)
            store.write_mask("mask.csv", field.mask)
            store.write_text("report.txt", summary)
            store.commit()
    click.echo(summary, nl=False)


@router.command("unstitch")
@input_option
@input_format_option
@output_dir_option
@output_format_option
@click.option("--slice-axis", type=_choice(Axis), default="row", show_default=True)
@click.option("--mssa-window", type=int, help="MSSA window L (default: half the slice length)")
@click.option("--mssa-k", type=int, default=settings.mssa_k, show_default=True)
@click.option("--cell-band", type=Pair(",", float), help="f_lo,f_hi in cycles per pixel")
@n_cells_option
@click.option("--band-margin", type=float, default=settings.band_margin, show_default=True)
@click.option("--aggregate", type=_choice(Aggregate), default="max", show_default=True)
@click.option("--rows", type=Pair(":"), help="Slice range start:stop")
@click.option("--threads", type=int, default=settings.threads, show_default=True)
def unstitch(input_path, input_format, output_dir, output_format, slice_axis, mssa_window, mssa_k, cell_band,
             n_cells, band_margin, aggregate, rows, threads):
    """Estimate the stitch displacement map and write the corrected image"""
    cfg = build_config(
        "unstitch", inputs=[input_path] if input_path else None, input_format=input_format,
        output_dir=output_dir, output_format=output_format, slice_axis=slice_axis, mssa_window=mssa_window,
        mssa_k=mssa_k, cell_band=cell_band, n_cells=n_cells, band_margin=band_margin, aggregate=aggregate,
        rows=rows, threads=threads,
    )
    _require_input(cfg)
    with handled("estimate displacement map"):
        img = load_image(cfg.inputs[0], cfg.input_format)
        extent = img.cols if cfg.slice_axis is Axis.ROW else img.rows
        band = cfg.resolve_band(extent)
        displacement = stitch_displacement(
            img, cfg.slice_axis, cfg.mssa_window, band, cfg.rows, cfg.mssa_k, cfg.aggregate, cfg.threads
        )
        corrected = apply_displacement(img, -displacement)
        summary = (
            f"band: {band[0]:.6g},{band[1]:.6g}\n"
            f"pairs: {len(displacement.shifts)}\n"
            f"flagged: {','.join(str(i) for i in displacement.flagged) or '-'}\n"
        )
        with ArtifactStore(cfg.output_dir) as store:
            store.write_vector("displacement.csv", displacement.shifts)
            store.write_image(f"corrected.{_extension(cfg.output_format)}", corrected, cfg.output_format)
            store.write_text("report.txt", summary)
            store.commit()
    click.echo(summary, nl=False)


@router.command("synth")
@click.option("--kind", type=click.Choice(["el", "cosine", "s1s2", "charlen"]), default="el", show_default=True)
@click.option("--dims", type=Pair("x"), default="120x160", show_default=True)
@output_dir_option
@output_format_option
@click.option("--n-cells", type=int, default=10, show_default=True)
@click.option("--cell-period", type=float, help="Pixels per cell (default: extent / n_cells)")
@cell_axis_option
@click.option("--noise", type=float, help="Noise sigma (default: 0 for images, 1 for s1s2)")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--shift", type=float, default=7.0, show_default=True)
@click.option("--length", type=int, default=1000, show_default=True)
@click.option("--s", "amplitude", type=float, default=1.0)
@click.option("--rho-r", type=float, default=1.0)
@click.option("--rho-c", type=float, default=1.0)
@click.option("--om-r", type=float, default=0.0)
@click.option("--om-c", type=float, default=0.0)
@click.option("--phi", type=float, default=0.0)
@click.option("--lambda0", type=float, default=0.05, show_default=True)
@click.option("--cell-width", type=int, default=40, show_default=True)
@click.option("--c", type=float, default=1.0, show_default=True)
@click.option("--c0", type=float, default=38.7, show_default=True)
@click.option("--v-edge", type=float, default=0.6, show_default=True)
def synth(kind, dims, output_dir, output_format, n_cells, cell_period, cell_axis, noise, seed, shift, length,
          amplitude, rho_r, rho_c, om_r, om_c, phi, lambda0, cell_width, c, c0, v_edge):
    """Write synthetic test images with their ground-truth sidecars"""
    cfg = build_config(
        "synth", output_dir=output_dir, output_format=output_format, dims=dims, n_cells=n_cells,
        cell_axis=cell_axis, seed=seed, c=c, c0=c0,
    )
    ext = _extension(cfg.output_format)
    with handled(f"generate {kind} data"):
        store = ArtifactStore(cfg.output_dir)
        with store:
            if kind == "el":
                extent = cfg.dims[0] if cfg.cell_axis is Axis.ROW else cfg.dims[1]
                spec = ElSynthSpec(
                    dims=cfg.dims, n_cells=cfg.n_cells, cell_period=cell_period or extent / cfg.n_cells,
                    cell_axis=cfg.cell_axis, noise_sigma=noise or 0.0, seed=cfg.seed,
                )
                image, truth = gen_el_like(spec)
                store.write_image(f"image.{ext}", image, cfg.output_format)
                for name in ("trend", "cell", "defects", "noise"):
                    store.write_image(f"{name}.{ext}", getattr(truth, name), cfg.output_format)
                store.write_model("cell_model.yaml", ModelDocument.from_groups({"S": truth.cell_model}))
            elif kind == "cosine":
                term = SinusoidTerm(s=amplitude, rho_r=rho_r, rho_c=rho_c, om_r=om_r, om_c=om_c, phi=phi)
                store.write_image(f"image.{ext}", gen_cosine2d(term, cfg.dims), cfg.output_format)
                store.write_model("model.yaml", ModelDocument.from_groups({"G": ParametricModel2D(terms=(term,))}))
            elif kind == "s1s2":
                sigma = 1.0 if noise is None else noise
                first, second = gen_s1_s2(shift, length, cfg.seed, noise_sigma=sigma)
                store.write_vector("s1.csv", first.values)
                store.write_vector("s2.csv", second.values)
                store.write_json("truth.json", SeriesPairTruth(shift=shift, n=length, seed=cfg.seed, noise_sigma=sigma))
            else:
                truth = CharLengthTruth(
                    lambda0=lambda0, cell_width=cell_width, n_cells=cfg.n_cells, c=cfg.c, c0=cfg.c0,
                    v_edge=v_edge, n_rows=cfg.dims[0],
                )
                image = gen_charlen_profile(lambda0, cell_width, cfg.n_cells, cfg.c, cfg.c0, v_edge, n_rows=cfg.dims[0])
                voltage = np.tile(charlen_voltage(lambda0, cell_width, cfg.n_cells, v_edge), (cfg.dims[0], 1))
                store.write_image(f"image.{ext}", image, cfg.output_format)
                store.write_image(f"voltage.{ext}", Image2D(values=voltage), cfg.output_format)
                store.write_json("truth.json", truth)
            written = store.commit()
    click.echo("\n".join(str(path) for path in written))


@router.command("bench")
@click.option("--sizes", default="250,500,1000,2000", show_default=True, help="Comma-separated square sizes")
@k_option
@click.option("--repeats", type=int, default=1, show_default=True)
@click.option("--output-dir", type=click.Path(path_type=Path), help="Also write report.txt / report.json here")
def bench(sizes, k, repeats, output_dir):
    """Time 2D-SSA decomposition over growing image sizes"""
    try:
        size_list = [int(part) for part in sizes.split(",") if part.strip()]
    except ValueError:
        raise CommandError(f"Invalid sizes {sizes!r}")
    if not size_list or min(size_list) < 4 or k < 1 or repeats < 1:
        raise CommandError("bench needs sizes >= 4, k >= 1 and repeats >= 1")
    with handled("run benchmark"):
        report = run_bench(size_list, k=k, repeats=repeats)
        if output_dir is not None:
            with ArtifactStore(output_dir) as store:
                store.write_text("report.txt", report.to_text())
                store.write_json("report.json", report)
                store.commit()
    click.echo(report.to_text(), nl=False)
