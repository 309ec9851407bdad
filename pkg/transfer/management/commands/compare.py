"""
Proposed method against the plain-AE baselines on one task, same seeds.

Exemple :
  python manage.py compare --anomaly-rate 0.45 --repeats 5 --out artifacts/compare_045
"""
from __future__ import annotations

from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand

from transfer.management.commands._options import (
    add_config_arguments,
    add_task_arguments,
    command_errors,
    config_overrides,
    echo_options,
    task_recipe,
)
from transfer.services.evaluation import METHODS, compare
from transfer.services.experiment import (
    RunManifest,
    format_table,
    parse_config_file,
    resolve_config,
    timed,
    train_config,
)


class Command(BaseCommand):
    help = "Compare the proposed method with the fine-tune, source-only and oracle AEs; writes comparison.csv."

    def add_arguments(self, parser):
        parser.add_argument("--methods", default=",".join(METHODS),
                            help=f"Comma-separated subset of {', '.join(METHODS)}.")
        parser.add_argument("--jobs", type=int, default=None)
        parser.add_argument("--out", required=True)
        add_task_arguments(parser)
        add_config_arguments(parser)

    def handle(self, *args, **options):
        out = Path(options["out"])
        timings = {}
        methods = [m.strip() for m in options["methods"].split(",") if m.strip()]
        with command_errors():
            resolved = resolve_config(parse_config_file(options["config"]), config_overrides(options))
            cfg = train_config(resolved)
            jobs = options["jobs"] or settings.TRANSFER_JOBS
            with timed(timings, "compare"):
                table = compare(cfg, task_recipe(options), methods, repeats=resolved["repeats"], jobs=jobs,
                                eval_fraction=resolved["eval_fraction"])
            out.mkdir(parents=True, exist_ok=True)
            table.to_csv(out / "comparison.csv", index=False, float_format="%.10g")
            manifest = RunManifest(command="compare", config=resolved, seed=cfg.seed, timings_ms=timings,
                                   extra={"methods": methods, "options": echo_options(options)})
            manifest.add_output("comparison", out / "comparison.csv")
            manifest.write(out)

        rows = [(row["method"], row["auc_median"], row["auc_spread"]) for _, row in table.iterrows()]
        self.stdout.write(format_table(["method", "median AUC", "spread"], rows, title=f"Comparison -> {out}"))
        self.stdout.write(self.style.SUCCESS("OK"))
