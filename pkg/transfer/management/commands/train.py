"""
Two-stage training of the importance-weighted adversarial autoencoder.

Exemple :
  python manage.py train --data artifacts/synth --out artifacts/run0 --config experiment.env --seed 1

With target labels in the dataset, a held-out split is evaluated every epoch
(metrics.csv columns heldout_*, histograms, metrics.json/roc.csv). Without
labels the whole dataset trains and only the model and losses are written.
"""
from __future__ import annotations

from pathlib import Path

from django.core.management.base import BaseCommand

from transfer.management.commands._options import (
    add_config_arguments,
    command_errors,
    config_overrides,
    echo_options,
)
from transfer.services.datasets import load_dataset, split_dataset
from transfer.services.evaluation import export_reconstructions, run_experiment, write_eval_artifacts
from transfer.services.experiment import (
    RunManifest,
    format_table,
    parse_config_file,
    resolve_config,
    timed,
    train_config,
)
from transfer.services.trainer import run_pipeline


class Command(BaseCommand):
    help = "Train the weighted adversarial autoencoder on a saved dataset."

    def add_arguments(self, parser):
        parser.add_argument("--data", required=True, help="Dataset directory (gen_data output).")
        parser.add_argument("--out", required=True, help="Run directory.")
        parser.add_argument("--export-reconstructions", action="store_true",
                            help="Write recon.png (input | reconstruction | error) for image datasets.")
        add_config_arguments(parser)

    def handle(self, *args, **options):
        out = Path(options["out"])
        timings = {}
        with command_errors():
            resolved = resolve_config(parse_config_file(options["config"]), config_overrides(options))
            cfg = train_config(resolved)
            self.stdout.write(format_table(["key", "value"], sorted(resolved.items()), title="Configuration"))

            with timed(timings, "load"):
                dataset = load_dataset(options["data"])
            manifest = RunManifest(command="train", config=resolved, seed=cfg.seed, timings_ms=timings,
                                   extra={"options": echo_options(options)})

            if dataset.target_eval_labels is not None:
                with timed(timings, "train"):
                    result = run_experiment(cfg, dataset, out_dir=out, eval_fraction=resolved["eval_fraction"],
                                            bins=resolved["hist_bins"])
                with timed(timings, "evaluate"):
                    written = write_eval_artifacts(result.evaluation, out, resolved,
                                                   hist_name=f"hist_epoch{cfg.total_epochs - 1:03d}.csv")
                for name, path in written.items():
                    manifest.add_output(name, path)
            else:
                self.stdout.write(self.style.WARNING("dataset has no target labels: training on everything, no AUC"))
                with timed(timings, "train"):
                    result = run_pipeline(cfg, dataset.training_view(), out_dir=out)

            if options["export_reconstructions"] and dataset.source.ndim == 4:
                _, eval_set = split_dataset(dataset, resolved["eval_fraction"], cfg.seed)
                manifest.add_output("reconstructions", export_reconstructions(result.bundle, eval_set.target, out / "recon.png"))

            manifest.add_output("metrics_csv", out / "metrics.csv")
            manifest.add_output("model", out / "model.npz")
            manifest.write(out)

        last = result.losses.records[-1]
        rows = [
            ("epochs", len(result.losses)),
            ("final source recon", last.source_recon),
            ("final target recon", last.target_recon),
            ("eta / beta", f"{result.weight_cfg.eta:.4g} / {result.weight_cfg.beta:.4g}"),
        ]
        if result.evaluation is not None and result.evaluation.auc is not None:
            rows.append(("held-out AUC", result.evaluation.auc))
        self.stdout.write(format_table(["metric", "value"], rows, title=f"Training -> {out}"))
        self.stdout.write(self.style.SUCCESS("OK"))
