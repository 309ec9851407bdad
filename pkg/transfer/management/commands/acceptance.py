"""
Desk-scale acceptance checks over several seeds.

Exemples :
  python manage.py acceptance --out artifacts/acceptance
  python manage.py acceptance --criteria 6,7 --repeats 3 --out artifacts/acceptance_quick
  python manage.py acceptance --criteria 11 --out artifacts/acceptance_m2u \
      --source-images train-images-idx3-ubyte.gz --source-labels train-labels-idx1-ubyte.gz \
      --target-images usps-images.gz --target-labels usps-labels.gz --resize 28 --rgb

Criteria 6 and 7 train the proposed method on the synthetic task and read the
monitored held-out metrics at the end of each stage; 8 and 9 are sweeps; 11
needs image files. The other properties are covered by the test suite.
Exit code 1 when any checked criterion fails.
"""
from __future__ import annotations

import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd
from django.conf import settings
from django.core.management.base import BaseCommand, CommandError
from joblib import Parallel, delayed

from transfer.exceptions import ConfigError
from transfer.management.commands._options import (
    add_config_arguments,
    add_task_arguments,
    command_errors,
    config_overrides,
    echo_options,
    task_recipe,
)
from transfer.services.evaluation import compare, stage_dynamics, sweep
from transfer.services.experiment import (
    RunManifest,
    format_table,
    parse_config_file,
    resolve_config,
    timed,
    train_config,
)

CRITERIA = (6, 7, 8, 9, 11)
ALIGNMENT_EPOCHS = 50
RATE_GRID = (0.05, 0.25, 0.45)
WEIGHT_GRID = (0.25, 0.5, 1.0, 2.0)
IMAGE_TASK = {"n_source": 2000, "n_target": 2000, "anomaly_rate": 0.25}

EXIT_FAILED = 1


def _dynamics_run(cfg, recipe, seed, eval_fraction) -> dict:
    return stage_dynamics(replace(cfg, seed=seed), recipe.build(seed), eval_fraction)


def _verdict(criterion, description, measured, threshold, passed) -> dict:
    return {"criterion": criterion, "description": description, "measured": measured,
            "threshold": threshold, "passed": bool(passed)}


class Command(BaseCommand):
    help = "Run the multi-seed acceptance criteria and print a verdict table."

    def add_arguments(self, parser):
        parser.add_argument("--criteria", default="6,7,8,9",
                            help="Comma-separated subset of 6,7,8,9,11 (11 needs --source-images).")
        parser.add_argument("--jobs", type=int, default=None)
        parser.add_argument("--out", required=True)
        add_task_arguments(parser)
        add_config_arguments(parser)

    def handle(self, *args, **options):
        out = Path(options["out"])
        timings = {}
        verdicts = []
        with command_errors():
            criteria = self._criteria(options["criteria"])
            file_values = parse_config_file(options["config"])
            overrides = config_overrides(options)
            if "adversarial_epochs" not in file_values and "adversarial_epochs" not in overrides:
                overrides["adversarial_epochs"] = ALIGNMENT_EPOCHS
            resolved = resolve_config(file_values, overrides)
            cfg = train_config(resolved)
            repeats = resolved["repeats"]
            jobs = options["jobs"] or settings.TRANSFER_JOBS
            eval_fraction = resolved["eval_fraction"]
            seeds = [cfg.seed + r for r in range(repeats)]
            self.stdout.write(format_table(["key", "value"], sorted(resolved.items()), title="Configuration"))

            synth_options = {**options, "data": None, "source_images": None, "source_csv": None}
            synth = task_recipe(synth_options)
            out.mkdir(parents=True, exist_ok=True)
            manifest = RunManifest(command="acceptance", config=resolved, seed=cfg.seed, timings_ms=timings,
                                   extra={"criteria": criteria, "seeds": seeds, "options": echo_options(options)})

            if 6 in criteria or 7 in criteria:
                if cfg.pretrain_epochs < 1 or cfg.adversarial_epochs < 1:
                    raise ConfigError("criteria 6 and 7 need both training stages")
                self.stdout.write(f"Dynamics on the synthetic task, seeds {seeds} ...")
                with timed(timings, "dynamics"):
                    runs = Parallel(n_jobs=jobs)(
                        delayed(_dynamics_run)(cfg, synth, seed, eval_fraction) for seed in seeds
                    )
                dynamics = pd.DataFrame(runs)
                dynamics.to_csv(out / "dynamics.csv", index=False, float_format="%.10g")
                manifest.add_output("dynamics", out / "dynamics.csv")
                med = dynamics.median(numeric_only=True)
                if 6 in criteria:
                    verdicts.append(_verdict("6a", "separability accuracy after pretraining", med["separability_accuracy_pretrain"],
                                             "> 0.9", med["separability_accuracy_pretrain"] > 0.9))
                    acc = med["classifier_accuracy_final"]
                    verdicts.append(_verdict("6b", f"C held-out accuracy after {cfg.adversarial_epochs} adversarial epochs",
                                             acc, "in [0.4, 0.65]", 0.4 <= acc <= 0.65))
                if 7 in criteria:
                    gap_pre, gap_post = med["gap_pretrain"], med["gap_final"]
                    growth = (gap_post - gap_pre) / gap_pre if gap_pre > 0 else math.nan
                    verdicts.append(_verdict("7a", "separation gap growth over stage 2", growth, ">= 0.5",
                                             gap_pre > 0 and growth >= 0.5))
                    verdicts.append(_verdict("7b", "target-anomaly mean recon change", med["anomaly_change"],
                                             "< 0.2", med["anomaly_change"] < 0.2))
                    verdicts.append(_verdict("7c", "target-normal mean recon drop", med["normal_drop"],
                                             "> 0.4", med["normal_drop"] > 0.4))

            if 8 in criteria:
                self.stdout.write(f"Anomaly-rate sweep {list(RATE_GRID)}, proposed vs fine-tune ...")
                with timed(timings, "rate_sweep"):
                    tables = [sweep(cfg, synth, "anomaly_rate", RATE_GRID, repeats, jobs, method, eval_fraction)
                              for method in ("proposed", "finetune")]
                table = pd.concat(tables, ignore_index=True)
                table.to_csv(out / "rate_sweep.csv", index=False, float_format="%.10g")
                manifest.add_output("rate_sweep", out / "rate_sweep.csv")
                med = {(r["method"], r["value"]): r["auc_median"] for _, r in table.iterrows()}
                lo, hi = RATE_GRID[0], RATE_GRID[-1]
                drop_p = med[("proposed", lo)] - med[("proposed", hi)]
                drop_f = med[("finetune", lo)] - med[("finetune", hi)]
                verdicts.append(_verdict("8a", f"AUC drop {lo} -> {hi}, proposed vs fine-tune",
                                         f"{drop_p:.4f} vs {drop_f:.4f}", "proposed < fine-tune", drop_p < drop_f))
                margin = med[("proposed", hi)] - med[("finetune", hi)]
                verdicts.append(_verdict("8b", f"AUC margin over fine-tune at rate {hi}", margin, ">= 0.05",
                                         margin >= 0.05))

            if 9 in criteria:
                self.stdout.write(f"w_adloss sweep {list(WEIGHT_GRID)} ...")
                with timed(timings, "weight_sweep"):
                    table = sweep(cfg, synth, "w_adloss", WEIGHT_GRID, repeats, jobs, "proposed", eval_fraction)
                table.to_csv(out / "w_adloss_sweep.csv", index=False, float_format="%.10g")
                manifest.add_output("w_adloss_sweep", out / "w_adloss_sweep.csv")
                spread = float(np.ptp(table["auc_median"].to_numpy()))
                verdicts.append(_verdict("9", "median AUC range across w_adloss", spread, "< 0.10", spread < 0.10))

            if 11 in criteria:
                if not options.get("source_images"):
                    raise ConfigError("criterion 11 needs --source-images/--source-labels (and target IDX files)")
                image_options = {**options, "data": None,
                                 **{k: v for k, v in IMAGE_TASK.items() if options.get(k) is None}}
                image_cfg = replace(cfg, arch="conv")
                self.stdout.write("Image task, proposed vs fine-tune (conv) ...")
                with timed(timings, "image_task"):
                    table = compare(image_cfg, task_recipe(image_options), ["proposed", "finetune"], repeats, jobs,
                                    eval_fraction)
                table.to_csv(out / "image_comparison.csv", index=False, float_format="%.10g")
                manifest.add_output("image_comparison", out / "image_comparison.csv")
                med = dict(zip(table["method"], table["auc_median"]))
                verdicts.append(_verdict("11", "image task median AUC, proposed vs fine-tune",
                                         f"{med['proposed']:.4f} vs {med['finetune']:.4f}", "proposed > fine-tune",
                                         med["proposed"] > med["finetune"]))

            report = pd.DataFrame(verdicts)
            report.to_csv(out / "acceptance.csv", index=False, float_format="%.10g")
            manifest.add_output("acceptance", out / "acceptance.csv")
            manifest.write(out)

        rows = [(v["criterion"], v["description"], v["measured"], v["threshold"], "PASS" if v["passed"] else "FAIL")
                for v in verdicts]
        self.stdout.write(format_table(["#", "check", "measured", "required", "verdict"], rows,
                                       title=f"Acceptance -> {out}"))
        failed = [v["criterion"] for v in verdicts if not v["passed"]]
        if failed:
            raise CommandError(f"failed: {', '.join(failed)}", returncode=EXIT_FAILED)
        self.stdout.write(self.style.SUCCESS("OK: all checked criteria pass"))

    @staticmethod
    def _criteria(text: str):
        try:
            chosen = sorted({int(part) for part in text.split(",") if part.strip()})
        except ValueError as exc:
            raise ConfigError(f"bad --criteria {text!r}") from exc
        unknown = [c for c in chosen if c not in CRITERIA]
        if unknown or not chosen:
            raise ConfigError(f"--criteria must be a subset of {CRITERIA}, got {text!r}")
        return chosen
