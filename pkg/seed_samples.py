from pathlib import Path

from app.models import Axis, Defect, ElSynthSpec, ImageFormat, SinusoidTerm
from app.services.synth import gen_el_like
from app.storage import ArtifactStore, ModelDocument

SAMPLES_DIR = Path("samples")

# A handful of small images covering both cell axes, trends and defects
SAMPLES = {
    "rows_plain": ElSynthSpec(dims=(120, 160), n_cells=10, cell_period=12.0, noise_sigma=0.01, seed=1),
    "cols_trend": ElSynthSpec(
        dims=(100, 200),
        n_cells=20,
        cell_period=10.0,
        cell_axis=Axis.COL,
        trend_terms=(SinusoidTerm(s=0.2, rho_r=0.995, om_r=0.01),),
        noise_sigma=0.01,
        seed=2,
    ),
    "rows_defects": ElSynthSpec(
        dims=(150, 150),
        n_cells=15,
        cell_period=10.0,
        trend_poly=((0.0, 0.1), (0.2, -0.1)),
        defects=(Defect(center=(40.0, 60.0), radius=4.0, depth=0.3), Defect(center=(110.0, 30.0), radius=6.0, depth=0.2)),
        noise_sigma=0.02,
        seed=3,
    ),
}


def seed_samples() -> None:
    print(f"🌱 Writing {len(SAMPLES)} synthetic EL samples to {SAMPLES_DIR}/ ...")

    for name, spec in SAMPLES.items():
        try:
            image, truth = gen_el_like(spec)
            with ArtifactStore(SAMPLES_DIR / name) as store:
                store.write_image("image.csv", image, ImageFormat.CSV)
                store.write_image("image.png", image, ImageFormat.PNG16)
                for part in ("trend", "cell", "defects", "noise"):
                    store.write_image(f"{part}.csv", getattr(truth, part), ImageFormat.CSV)
                store.write_model("cell_model.yaml", ModelDocument.from_groups({"S": truth.cell_model}))
                store.write_text("spec.json", spec.model_dump_json(indent=2) + "\n")
                store.commit()
            print(f"✅ {name}: {spec.dims[0]}x{spec.dims[1]}, {spec.n_cells} cells along {spec.cell_axis.value}")
        except Exception as e:
            print(f"❌ Failed to write sample {name}: {e}")

    print("\n✨ Seeding complete! Try: python -m app.main decompose --input samples/rows_plain/image.csv --n-cells 10")


if __name__ == "__main__":
    seed_samples()
