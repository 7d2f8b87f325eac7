import time

import click

from app.models import Aggregate
from app.services.elproc import shift_accuracy


@click.command(help="Accuracy of MSSA shift estimation on the two-series simulation")
@click.option("--repeats", type=int, default=100, show_default=True)
@click.option("--aggregate", type=click.Choice([a.value for a in Aggregate]), default="median", show_default=True)
def reproduce(repeats: int, aggregate: str) -> None:
    print(f"🚀 Estimating shift 7 on {repeats} noisy s1/s2 pairs ({aggregate} over components)...")
    start = time.perf_counter()
    try:
        report = shift_accuracy(repeats=repeats, aggregate=Aggregate(aggregate))
    except Exception as e:
        print(f"❌ Shift study failed: {e}")
        return
    print(report.to_text(), end="")
    print(f"🏁 Done in {time.perf_counter() - start:.1f} s")


if __name__ == "__main__":
    reproduce()
