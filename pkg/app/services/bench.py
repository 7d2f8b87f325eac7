import logging
import time
import tracemalloc
from typing import Callable, Sequence, Tuple

from app.models import Axis, BenchReport, BenchRow, DiffBenchRow, ElSynthSpec, EmbeddingWindow, ParametricModel2D, SinusoidTerm
from app.services.elproc import detect_lines
from app.services.hankel import make_operator
from app.services.sigmodel import differentiate
from app.services.ssa2d import decompose_2d
from app.services.synth import gen_el_like, noise_generator

logger = logging.getLogger(__name__)

QUADRATIC_RATIO = 16.0
N_LOG_N_RATIO = 5.0


def best_of(action: Callable[[], object], repeats: int) -> float:
    """Fastest wall time of ``repeats`` runs, in seconds"""
    best = float("inf")
    for _ in range(max(repeats, 1)):
        start = time.perf_counter()
        action()
        best = min(best, time.perf_counter() - start)
    return best


def bench_image(size: int, seed: int = 0):
    n_cells = max(1, size // 10)
    spec = ElSynthSpec(
        dims=(size, size), n_cells=n_cells, cell_period=size / n_cells, noise_sigma=0.02, seed=seed
    )
    return gen_el_like(spec)[0]


def matvec_seconds(size: int, repeats: int = 5, seed: int = 0, batch: int = 1) -> float:
    """Best time of one fast product on a size x size image with half window

    Each timed sample runs ``batch`` products after an untimed warm-up one.
    """
    img = bench_image(size, seed)
    op = make_operator(img, EmbeddingWindow.half(img.dims))
    v = noise_generator(seed).standard_normal(op.shape[1])
    op.matvec(v)

    def products():
        for _ in range(max(batch, 1)):
            op.matvec(v)

    return best_of(products, repeats) / max(batch, 1)


def _diff_model(n_terms: int, seed: int) -> ParametricModel2D:
    rng = noise_generator(seed)
    return ParametricModel2D(
        terms=tuple(
            SinusoidTerm(s=1.0 / (i + 1), om_r=float(rng.uniform(0.02, 0.45)), phi=float(rng.uniform(-3, 3)))
            for i in range(n_terms)
        )
    )


def run_bench(
    sizes: Sequence[int] = (250, 500, 1000, 2000),
    k: int = 50,
    repeats: int = 1,
    diff_terms: Sequence[int] = (5, 9, 13, 17),
    diff_dims: Tuple[int, int] = (400, 100),
    seed: int = 0,
) -> BenchReport:
    """
    Time decompose_2d over square image sizes

    Peak memory is the tracemalloc peak of one extra (untimed) run. Closed-form
    differentiation plus line detection is timed for models of ``diff_terms`` terms.
    A single fast product is timed per size too; ``n_log_n`` holds when each size
    step grows it by less than N_LOG_N_RATIO.
    """
    rows = []
    for size in sizes:
        img = bench_image(size, seed)
        seconds = best_of(lambda: decompose_2d(img, k=k, seed=seed), repeats)
        tracemalloc.start()
        try:
            decompose_2d(img, k=k, seed=seed)
            _, peak = tracemalloc.get_traced_memory()
        finally:
            tracemalloc.stop()
        product = matvec_seconds(size, repeats=max(repeats, 3), seed=seed, batch=3)
        rows.append(BenchRow(size=size, seconds=seconds, peak_mib=peak / 2 ** 20, matvec_seconds=product))
        logger.info(f"⏱️ {size}x{size}: {seconds:.3f} s, matvec {product * 1e3:.2f} ms, peak {peak / 2 ** 20:.1f} MiB")

    ratios = [b.seconds / a.seconds for a, b in zip(rows, rows[1:]) if a.seconds > 0]
    matvec_ratios = [
        b.matvec_seconds / a.matvec_seconds for a, b in zip(rows, rows[1:]) if a.matvec_seconds > 0
    ]
    if not all(r < N_LOG_N_RATIO for r in matvec_ratios):
        logger.warning(f"⚠️ Fast product grows faster than n log n: {matvec_ratios}")
    differentiation = []
    for n_terms in diff_terms:
        model = _diff_model(n_terms, seed)
        seconds = best_of(
            lambda: detect_lines(differentiate(model, Axis.ROW), diff_dims, cell_axis=Axis.ROW), repeats
        )
        differentiation.append(DiffBenchRow(n_terms=n_terms, seconds=seconds))

    return BenchReport(
        k=k,
        rows=rows,
        ratios=ratios,
        subquadratic=all(r < QUADRATIC_RATIO for r in ratios),
        matvec_ratios=matvec_ratios,
        n_log_n=all(r < N_LOG_N_RATIO for r in matvec_ratios),
        differentiation=differentiation,
    )
