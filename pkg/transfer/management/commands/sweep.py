"""
Median AUC over repeated seeds along one axis.

Exemples :
  python manage.py sweep --axis anomaly-rate --grid 0.05,0.15,0.25,0.35,0.45 --out artifacts/sweep_rate
  python manage.py sweep --axis w-adloss --grid 0.25,0.5,1,2 --repeats 5 --jobs 4 --out artifacts/sweep_w
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
from transfer.services.evaluation import METHODS, sweep
from transfer.services.experiment import (
    RunManifest,
    format_table,
    parse_config_file,
    parse_grid,
    resolve_config,
    timed,
    train_config,
)

AXES = {"anomaly-rate": "anomaly_rate", "w-adloss": "w_adloss", "lambda": "lambda"}


class Command(BaseCommand):
    help = "Sweep anomaly rate, w_adloss or lambda; writes sweep.csv."

    def add_arguments(self, parser):
        parser.add_argument("--axis", choices=sorted(AXES), required=True)
        parser.add_argument("--grid", default=None,
                            help="Comma-separated values (anomaly-rate default: the 0.05..0.45 grid).")
        parser.add_argument("--method", choices=METHODS, default="proposed")
        parser.add_argument("--jobs", type=int, default=None, help="Parallel grid runs (default TRANSFER_JOBS).")
        parser.add_argument("--out", required=True)
        add_task_arguments(parser)
        add_config_arguments(parser)

    def handle(self, *args, **options):
        out = Path(options["out"])
        axis = AXES[options["axis"]]
        timings = {}
        with command_errors():
            resolved = resolve_config(parse_config_file(options["config"]), config_overrides(options))
            cfg = train_config(resolved)
            if options["grid"]:
                grid = parse_grid(options["grid"])
            elif axis == "anomaly_rate":
                grid = list(settings.TRANSFER_RATE_GRID)
            else:
                grid = [resolved[axis]]
            jobs = options["jobs"] or settings.TRANSFER_JOBS
            self.stdout.write(format_table(["key", "value"], sorted(resolved.items()), title="Configuration"))

            with timed(timings, "sweep"):
                recipe = task_recipe(options)
                table = sweep(cfg, recipe, axis, grid, repeats=resolved["repeats"], jobs=jobs,
                              method=options["method"], eval_fraction=resolved["eval_fraction"])
            out.mkdir(parents=True, exist_ok=True)
            table.to_csv(out / "sweep.csv", index=False, float_format="%.10g")

            manifest = RunManifest(command="sweep", config=resolved, seed=cfg.seed, timings_ms=timings,
                                   extra={"axis": axis, "grid": grid, "method": options["method"], "jobs": jobs,
                                          "options": echo_options(options)})
            manifest.add_output("sweep", out / "sweep.csv")
            manifest.write(out)

        rows = [(row["value"], row["auc_median"], row["auc_spread"]) for _, row in table.iterrows()]
        self.stdout.write(format_table([axis, "median AUC", "spread"], rows, title=f"Sweep ({options['method']}) -> {out}"))
        self.stdout.write(self.style.SUCCESS("OK"))
