"""
Scoring and experiments.

The anomaly score of a sample is its reconstruction loss (eval mode). On top of
that this module computes ROC/AUC, loss-distribution histograms for the three
populations (source, target normal, target anomaly), the separation gap per
epoch, a domain-separability check on encoder features, and drives the
experiments: single runs, AE baselines, sweeps and method comparisons.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from PIL import Image
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import roc_auc_score, roc_curve
from sklearn.model_selection import train_test_split

from transfer.exceptions import ConfigError, DimensionError, EvaluationError
from transfer.services import networks
from transfer.services import tensor_engine as te
from transfer.services.datasets import (
    ANOMALY,
    NORMAL,
    DomainDataset,
    EvalSet,
    TaskRecipe,
    normals_only,
    split_dataset,
)
from transfer.services.networks import ModelBundle
from transfer.services.trainer import (
    PRETRAIN,
    PipelineResult,
    TrainConfig,
    fit_autoencoder,
    run_pipeline,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SWEEP_AXES = ("anomaly_rate", "w_adloss", "lambda")
METHODS = ("proposed", "finetune", "source_only", "oracle")


@dataclass
class EvalReport:
    scores: np.ndarray
    labels: Optional[np.ndarray]
    auc: Optional[float]
    roc_points: np.ndarray
    histograms: Optional[pd.DataFrame] = None
    separation_gap: List[float] = field(default_factory=list)
    gap_epochs: List[int] = field(default_factory=list)
    extra: Dict[str, float] = field(default_factory=dict)

    def metrics(self) -> dict:
        return {
            "auc": self.auc,
            "n_scored": int(self.scores.size),
            "separation_gap": [float(g) for g in self.separation_gap],
            "gap_epochs": list(self.gap_epochs),
            **{k: float(v) for k, v in self.extra.items()},
        }


# ---------- scoring ----------

def anomaly_scores(bundle: ModelBundle, samples: np.ndarray) -> np.ndarray:
    return networks.reconstruction_losses(bundle, samples)


def roc_auc(scores, labels) -> Tuple[float, np.ndarray]:
    """(AUC, ROC points as an (n, 2) array of fpr, tpr) with anomalies as positives; ties count 1/2."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise DimensionError(f"{scores.size} scores for {labels.size} labels")
    if np.unique(labels).size < 2:
        raise EvaluationError("ROC/AUC needs both normal and anomalous samples")
    fpr, tpr, _ = roc_curve(labels, scores, pos_label=ANOMALY, drop_intermediate=False)
    auc = float(roc_auc_score(labels == ANOMALY, scores))
    return auc, np.column_stack([fpr, tpr])


def separation_gap(normal_scores, anomaly_scores_) -> float:
    """mean(target-anomaly scores) - mean(target-normal scores)."""
    normal_scores = np.asarray(normal_scores, dtype=np.float64)
    anomaly_scores_ = np.asarray(anomaly_scores_, dtype=np.float64)
    if normal_scores.size == 0 or anomaly_scores_.size == 0:
        raise EvaluationError("separation gap needs both target populations")
    return float(anomaly_scores_.mean() - normal_scores.mean())


def histogram_table(populations: Dict[str, np.ndarray], bins: int) -> pd.DataFrame:
    """Counts per population on one shared set of bin edges."""
    if bins < 1:
        raise ConfigError(f"bins must be >= 1, got {bins}")
    pooled = np.concatenate([np.asarray(v, dtype=np.float64).reshape(-1) for v in populations.values()])
    if pooled.size == 0:
        raise EvaluationError("no scores to bin")
    edges = np.histogram_bin_edges(pooled, bins=bins)
    table = pd.DataFrame({"bin_lo": edges[:-1], "bin_hi": edges[1:]})
    for name, values in populations.items():
        table[name], _ = np.histogram(np.asarray(values, dtype=np.float64), bins=edges)
    return table


def _population_scores(
    bundle: ModelBundle, eval_set: EvalSet, target: Optional[np.ndarray] = None
) -> Dict[str, np.ndarray]:
    if target is None:
        target = anomaly_scores(bundle, eval_set.target)
    pops = {"src": anomaly_scores(bundle, eval_set.source)}
    if eval_set.has_labels:
        pops["tgt_normal"] = target[eval_set.target_labels == NORMAL]
        pops["tgt_anomaly"] = target[eval_set.target_labels == ANOMALY]
    else:
        pops["tgt_normal"] = target
        pops["tgt_anomaly"] = target[:0]
    return pops


def loss_histogram(bundle: ModelBundle, eval_set: EvalSet, bins: int = 30) -> pd.DataFrame:
    """CSV-ready table ``bin_lo,bin_hi,src,tgt_normal,tgt_anomaly``."""
    return histogram_table(_population_scores(bundle, eval_set), bins)


def domain_separability(bundle: ModelBundle, eval_set: EvalSet, seed: int = 0) -> Dict[str, float]:
    """
    Held-out domain separability of the encoder features: accuracy of the
    model's own classifier C, accuracy of a logistic-regression classifier trained
    on half of the held-out features, and the proxy A-distance 2 * (1 - 2 * err).
    """
    src = networks.encode(bundle, eval_set.source)
    tgt = networks.encode(bundle, eval_set.target)
    features = np.vstack([src, tgt])
    domains = np.concatenate([np.zeros(len(src), dtype=int), np.ones(len(tgt), dtype=int)])

    probs = np.concatenate([networks.domain_probabilities(bundle, eval_set.source),
                            networks.domain_probabilities(bundle, eval_set.target)])
    classifier_accuracy = float(np.mean((probs > 0.5) == domains))

    x_fit, x_test, y_fit, y_test = train_test_split(features, domains, test_size=0.5, random_state=seed, stratify=domains)
    clf = LogisticRegression(solver="liblinear", class_weight="balanced", random_state=seed)
    clf.fit(x_fit, y_fit)
    error = float(np.mean(clf.predict(x_test) != y_test))
    error = min(error, 1.0 - error)
    return {
        "heldout_domain_accuracy": classifier_accuracy,
        "separability_accuracy": 1.0 - error,
        "proxy_a_distance": 2.0 * (1.0 - 2.0 * error),
    }


def evaluate_bundle(bundle: ModelBundle, eval_set: EvalSet, bins: int = 30) -> EvalReport:
    """Final scoring of the held-out target; without labels only the scores are filled in."""
    scores = anomaly_scores(bundle, eval_set.target)
    pops = _population_scores(bundle, eval_set, scores)
    histograms = histogram_table(pops, bins)
    if not eval_set.has_labels:
        logger.warning("no target labels: scores only, AUC omitted")
        return EvalReport(scores, None, None, np.empty((0, 2)), histograms)
    auc, roc = roc_auc(scores, eval_set.target_labels)
    report = EvalReport(scores, eval_set.target_labels, auc, roc, histograms)
    if pops["tgt_anomaly"].size and pops["tgt_normal"].size:
        report.extra["final_gap"] = separation_gap(pops["tgt_normal"], pops["tgt_anomaly"])
    return report


# ---------- monitoring ----------

class LabelledMonitor:
    """Per-epoch held-out metrics; histogram snapshots every `snapshot_every` epochs when `out_dir` is set."""

    def __init__(
        self,
        eval_set: EvalSet,
        bins: int = 30,
        snapshot_every: int = 10,
        out_dir: Optional[PathLike] = None,
        seed: int = 0,
        separability: bool = True,
    ):
        self.eval_set = eval_set
        self.bins = bins
        self.snapshot_every = snapshot_every
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.seed = seed
        self.separability = separability
        self.gaps: List[float] = []
        self.gap_epochs: List[int] = []

    def on_epoch(self, epoch: int, stage: str, bundle: ModelBundle) -> Dict[str, float]:
        pops = _population_scores(bundle, self.eval_set)
        row = {"heldout_source_recon": float(pops["src"].mean())}
        if self.eval_set.has_labels:
            normal, anomaly = pops["tgt_normal"], pops["tgt_anomaly"]
            row["heldout_target_normal_recon"] = float(normal.mean()) if normal.size else math.nan
            row["heldout_target_anomaly_recon"] = float(anomaly.mean()) if anomaly.size else math.nan
            if normal.size and anomaly.size:
                row["separation_gap"] = separation_gap(normal, anomaly)
                self.gaps.append(row["separation_gap"])
                self.gap_epochs.append(epoch)
        else:
            row["heldout_target_recon"] = float(pops["tgt_normal"].mean())
        if self.separability:
            row.update(domain_separability(bundle, self.eval_set, self.seed))
        if self.out_dir is not None and self.snapshot_every > 0 and (epoch + 1) % self.snapshot_every == 0:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            histogram_table(pops, self.bins).to_csv(self.out_dir / f"hist_epoch{epoch:03d}.csv", index=False,
                                                    float_format="%.10g")
        return row

    def finalize(self, bundle: ModelBundle) -> EvalReport:
        report = evaluate_bundle(bundle, self.eval_set, self.bins)
        report.separation_gap = list(self.gaps)
        report.gap_epochs = list(self.gap_epochs)
        return report


# ---------- experiments ----------

def run_experiment(
    cfg: TrainConfig,
    dataset: DomainDataset,
    out_dir: Optional[PathLike] = None,
    eval_fraction: float = 0.5,
    bins: int = 30,
    separability: bool = True,
) -> PipelineResult:
    """Split, train the proposed method under a LabelledMonitor, score the held-out target."""
    train, eval_set = split_dataset(dataset, eval_fraction, cfg.seed)
    monitor = LabelledMonitor(eval_set, bins, cfg.snapshot_every, out_dir, cfg.seed, separability)
    return run_pipeline(cfg, train.training_view(), monitor=monitor, out_dir=out_dir)


def stage_dynamics(cfg: TrainConfig, dataset: DomainDataset, eval_fraction: float = 0.5) -> Dict[str, float]:
    """
    Held-out metrics at the end of pretraining and at the last adversarial
    epoch of one monitored run, plus the relative changes over stage 2.
    """
    if cfg.pretrain_epochs < 1 or cfg.adversarial_epochs < 1:
        raise ConfigError("stage dynamics need both training stages")
    result = run_experiment(cfg, dataset, eval_fraction=eval_fraction, separability=True)
    pre = result.losses.stage(PRETRAIN).records[-1].to_row()
    post = result.losses.records[-1].to_row()
    normal_pre, normal_post = pre["heldout_target_normal_recon"], post["heldout_target_normal_recon"]
    anomaly_pre, anomaly_post = pre["heldout_target_anomaly_recon"], post["heldout_target_anomaly_recon"]
    return {
        "seed": cfg.seed,
        "separability_accuracy_pretrain": pre["separability_accuracy"],
        "separability_accuracy_final": post["separability_accuracy"],
        "classifier_accuracy_final": post["heldout_domain_accuracy"],
        "gap_pretrain": pre["separation_gap"],
        "gap_final": post["separation_gap"],
        "normal_recon_pretrain": normal_pre,
        "normal_recon_final": normal_post,
        "anomaly_recon_pretrain": anomaly_pre,
        "anomaly_recon_final": anomaly_post,
        "normal_drop": (normal_pre - normal_post) / normal_pre,
        "anomaly_change": abs(anomaly_post - anomaly_pre) / anomaly_pre,
        "auc": result.evaluation.auc,
    }


def baseline_finetune(
    cfg: TrainConfig,
    dataset: DomainDataset,
    finetune_epochs: Optional[int] = None,
    eval_fraction: float = 0.5,
    bins: int = 30,
) -> EvalReport:
    """
    Plain AE: `cfg.pretrain_epochs` on source data, then `finetune_epochs`
    (default `cfg.adversarial_epochs`) on the whole unlabeled training target.
    No weighting, no adversarial term.
    """
    train, eval_set = split_dataset(dataset, eval_fraction, cfg.seed)
    epochs = cfg.adversarial_epochs if finetune_epochs is None else finetune_epochs
    view = train.training_view()
    bundle, _ = fit_autoencoder(cfg, view.feature_shape, [("source", view.source, cfg.pretrain_epochs),
                                                          ("finetune", view.target, epochs)])
    return evaluate_bundle(bundle, eval_set, bins)


def baseline_source_only(cfg: TrainConfig, dataset: DomainDataset, eval_fraction: float = 0.5, bins: int = 30) -> EvalReport:
    return baseline_finetune(cfg, dataset, finetune_epochs=0, eval_fraction=eval_fraction, bins=bins)


def baseline_target_oracle(cfg: TrainConfig, dataset: DomainDataset, eval_fraction: float = 0.5, bins: int = 30) -> EvalReport:
    """Plain AE trained on the labelled normals of the training target for all epochs."""
    train, eval_set = split_dataset(dataset, eval_fraction, cfg.seed)
    normals = normals_only(train).target
    bundle, _ = fit_autoencoder(cfg, train.feature_shape, [("oracle", normals, cfg.total_epochs)])
    return evaluate_bundle(bundle, eval_set, bins)


def evaluate_method(method: str, cfg: TrainConfig, dataset: DomainDataset, eval_fraction: float = 0.5) -> EvalReport:
    if method == "proposed":
        return run_experiment(cfg, dataset, eval_fraction=eval_fraction, separability=False).evaluation
    if method == "finetune":
        return baseline_finetune(cfg, dataset, eval_fraction=eval_fraction)
    if method == "source_only":
        return baseline_source_only(cfg, dataset, eval_fraction=eval_fraction)
    if method == "oracle":
        return baseline_target_oracle(cfg, dataset, eval_fraction=eval_fraction)
    raise ConfigError(f"unknown method {method!r}, expected one of {METHODS}")


def grid_seed(base: int, point: Optional[int], repeat: int) -> int:
    """
    Seed of one run. Sweep points get independent seeds keyed by
    (base, point, repeat); comparisons (point None) reuse base + repeat so every
    method sees the same tasks.
    """
    if point is None:
        return int(base) + int(repeat)
    return int(np.random.SeedSequence([int(base), int(point), int(repeat)]).generate_state(1)[0])


def _grid_job(
    method: str,
    cfg: TrainConfig,
    recipe: TaskRecipe,
    axis: Optional[str],
    value: Optional[float],
    point: Optional[int],
    repeat: int,
    eval_fraction: float,
) -> float:
    seed = grid_seed(cfg.seed, point, repeat)
    run_cfg = replace(cfg, seed=seed)
    rate = None
    if axis == "anomaly_rate":
        rate = value
    elif axis == "w_adloss":
        run_cfg = replace(run_cfg, w_adloss=value)
    elif axis == "lambda":
        run_cfg = replace(run_cfg, lambda_=value)
    dataset = recipe.build(seed, rate)
    report = evaluate_method(method, run_cfg, dataset, eval_fraction)
    return float(report.auc) if report.auc is not None else math.nan


def _summary_row(aucs: Sequence[float]) -> dict:
    arr = np.asarray(aucs, dtype=np.float64)
    row = {
        "auc_median": float(np.nanmedian(arr)),
        "auc_spread": float((np.nanmax(arr) - np.nanmin(arr)) / 2.0),
    }
    row.update({f"auc_{i + 1}": float(a) for i, a in enumerate(arr)})
    return row


def sweep(
    cfg: TrainConfig,
    recipe: TaskRecipe,
    axis: str,
    grid: Sequence[float],
    repeats: int = 5,
    jobs: int = 1,
    method: str = "proposed",
    eval_fraction: float = 0.5,
) -> pd.DataFrame:
    """
    One row per grid point: median AUC over `repeats` runs, half-range spread,
    and one column per repeat. Every (point, repeat) pair draws a fresh seed
    from `grid_seed`; each job builds its own dataset and model.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}, expected one of {SWEEP_AXES}")
    if not grid:
        raise ConfigError("empty sweep grid")
    if repeats < 1:
        raise ConfigError(f"repeats must be >= 1, got {repeats}")
    tasks = [(i, value, r) for i, value in enumerate(grid) for r in range(repeats)]
    logger.info("sweep %s over %s: %d runs on %d job(s)", axis, list(grid), len(tasks), jobs)
    aucs = Parallel(n_jobs=jobs)(
        delayed(_grid_job)(method, cfg, recipe, axis, float(value), i, r, eval_fraction) for i, value, r in tasks
    )
    rows = []
    for i, value in enumerate(grid):
        chunk = aucs[i * repeats:(i + 1) * repeats]
        rows.append({"axis": axis, "value": float(value), "method": method, **_summary_row(chunk)})
    return pd.DataFrame(rows)


def compare(
    cfg: TrainConfig,
    recipe: TaskRecipe,
    methods: Sequence[str] = METHODS,
    repeats: int = 5,
    jobs: int = 1,
    eval_fraction: float = 0.5,
) -> pd.DataFrame:
    """One row per method on the same task and seeds."""
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}, expected one of {METHODS}")
    tasks = [(m, r) for m in methods for r in range(repeats)]
    aucs = Parallel(n_jobs=jobs)(
        delayed(_grid_job)(m, cfg, recipe, None, None, None, r, eval_fraction) for m, r in tasks
    )
    rows = []
    for i, m in enumerate(methods):
        rows.append({"method": m, **_summary_row(aucs[i * repeats:(i + 1) * repeats])})
    return pd.DataFrame(rows)


# ---------- artifacts ----------

def _to_gray(img: np.ndarray) -> np.ndarray:
    # C x H x W -> H x W
    return img.mean(axis=0)


def export_reconstructions(
    bundle: ModelBundle,
    samples: np.ndarray,
    path: PathLike,
    max_items: int = 8,
    scale: int = 4,
) -> Path:
    """PNG grid, one row per sample: input | reconstruction | absolute error."""
    if samples.ndim != 4:
        raise DimensionError(f"reconstruction export needs N x C x H x W images, got shape {samples.shape}")
    batch = samples[:max_items]
    x = networks.as_input(bundle, batch)
    with te.no_grad():
        _, recon = networks.forward_autoencode(bundle, x, training=False)
    rows = []
    for original, rebuilt in zip(batch, recon.values):
        a, b = _to_gray(original), _to_gray(rebuilt)
        rows.append(np.hstack([a, b, np.abs(a - b)]))
    grid = np.clip(np.vstack(rows), 0.0, 1.0)
    image = Image.fromarray((grid * 255).round().astype(np.uint8))
    image = image.resize((image.width * scale, image.height * scale), Image.Resampling.NEAREST)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image.save(path)
    return path


def write_eval_artifacts(
    report: EvalReport,
    out_dir: PathLike,
    config_echo: Optional[dict] = None,
    hist_name: str = "hist_eval.csv",
) -> Dict[str, Path]:
    """metrics.json, roc.csv (when labelled), scores.csv and the histogram CSV."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: Dict[str, Path] = {}

    metrics = {**report.metrics(), "config": config_echo or {}}
    with open(out / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True, default=str)
    written["metrics"] = out / "metrics.json"

    scores = pd.DataFrame({"sample_id": np.arange(report.scores.size), "score": report.scores})
    if report.labels is not None:
        scores["label"] = report.labels
        pd.DataFrame(report.roc_points, columns=["fpr", "tpr"]).to_csv(out / "roc.csv", index=False, float_format="%.10g")
        written["roc"] = out / "roc.csv"
    scores.to_csv(out / "scores.csv", index=False, float_format="%.10g")
    written["scores"] = out / "scores.csv"

    if report.histograms is not None:
        report.histograms.to_csv(out / hist_name, index=False, float_format="%.10g")
        written["histogram"] = out / hist_name
    logger.info("evaluation artifacts written to %s", out)
    return written
