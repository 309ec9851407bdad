"""
Build an anomaly-transfer task and save it (dataset.npz + manifest.json).

Exemples :
  python manage.py gen_data --out artifacts/synth --anomaly-rate 0.25 --seed 0
  python manage.py gen_data --out artifacts/m2u \
      --source-images train-images-idx3-ubyte.gz --source-labels train-labels-idx1-ubyte.gz \
      --target-images usps-images.gz --target-labels usps-labels.gz --resize 28 --rgb \
      --normal-class 0 --anomaly-rate 0.25 --n-source 2000 --n-target 2000
"""
from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

from django.core.management.base import BaseCommand

from transfer.management.commands._options import (
    add_task_arguments,
    command_errors,
    echo_options,
    task_recipe,
)
from transfer.services.datasets import save_dataset
from transfer.services.experiment import RunManifest, format_table, timed


class Command(BaseCommand):
    help = "Generate a synthetic or IDX/CSV-derived anomaly-transfer dataset."

    def add_arguments(self, parser):
        add_task_arguments(parser)
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument("--out", required=True, help="Output directory.")

    def handle(self, *args, **options):
        out = Path(options["out"])
        timings = {}
        with command_errors():
            with timed(timings, "build"):
                recipe = task_recipe(options)
                dataset = recipe.build(options["seed"])
            prov = dataset.provenance
            manifest = RunManifest(command="gen_data", config=echo_options(options), seed=options["seed"],
                                   timings_ms=timings)
            manifest.add_output("dataset", out / "dataset.npz")
            save_dataset(out, dataset, run=asdict(manifest))

        rows = [
            ("feature shape", "x".join(str(v) for v in dataset.feature_shape)),
            ("source samples", dataset.source.shape[0]),
            ("target samples", dataset.target.shape[0]),
            ("realized anomalies", prov.get("realized_anomalies", "-")),
            ("realized rate", prov.get("realized_anomaly_rate", "-")),
        ]
        self.stdout.write(format_table(["field", "value"], rows, title=f"Dataset -> {out}"))
        self.stdout.write(self.style.SUCCESS(f"OK: dataset written to {out}"))
