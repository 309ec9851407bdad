"""
Score a dataset with a trained checkpoint.

Exemple :
  python manage.py eval --checkpoint artifacts/run0/model.npz --data artifacts/synth --out artifacts/run0/eval

By default the whole target set is scored; --heldout SEED scores only the
held-out half produced by the same split the training run used.
"""
from __future__ import annotations

from pathlib import Path

from django.core.management.base import BaseCommand

from transfer.management.commands._options import command_errors, echo_options
from transfer.services.checkpoint import load_checkpoint
from transfer.services.datasets import load_dataset, split_dataset
from transfer.services.evaluation import evaluate_bundle, write_eval_artifacts
from transfer.services.experiment import RunManifest, format_table, timed


class Command(BaseCommand):
    help = "Evaluate a checkpoint: metrics.json, roc.csv, scores.csv, histogram CSV."

    def add_arguments(self, parser):
        parser.add_argument("--checkpoint", required=True)
        parser.add_argument("--data", required=True, help="Dataset directory (gen_data output).")
        parser.add_argument("--out", required=True)
        parser.add_argument("--bins", type=int, default=30)
        parser.add_argument("--heldout", type=int, default=None, metavar="SEED",
                            help="Score only the held-out split of this seed.")
        parser.add_argument("--eval-fraction", type=float, default=0.5)

    def handle(self, *args, **options):
        out = Path(options["out"])
        timings = {}
        with command_errors():
            with timed(timings, "load"):
                bundle, _, meta = load_checkpoint(options["checkpoint"])
                dataset = load_dataset(options["data"])
            if options["heldout"] is not None:
                _, eval_set = split_dataset(dataset, options["eval_fraction"], options["heldout"])
            else:
                eval_set = dataset.eval_set()
            if not eval_set.has_labels:
                self.stdout.write(self.style.WARNING("dataset has no target labels: scores written, AUC omitted"))

            with timed(timings, "score"):
                report = evaluate_bundle(bundle, eval_set, options["bins"])
            epochs = meta.get("epochs")
            hist_name = f"hist_epoch{epochs - 1:03d}.csv" if epochs else "hist_eval.csv"
            echo = {"checkpoint": options["checkpoint"], "data": options["data"], "bins": options["bins"],
                    "heldout": options["heldout"], "model_config": meta.get("config", {})}
            written = write_eval_artifacts(report, out, echo, hist_name=hist_name)

            manifest = RunManifest(command="eval", config=echo_options(options), seed=options["heldout"],
                                   timings_ms=timings)
            for name, path in written.items():
                manifest.add_output(name, path)
            manifest.write(out)

        rows = [("scored samples", report.scores.size),
                ("AUC", "-" if report.auc is None else report.auc)]
        if "final_gap" in report.extra:
            rows.append(("separation gap", report.extra["final_gap"]))
        self.stdout.write(format_table(["metric", "value"], rows, title=f"Evaluation -> {out}"))
        self.stdout.write(self.style.SUCCESS("OK"))
