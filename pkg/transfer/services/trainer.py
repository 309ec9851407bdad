"""
Two-stage training.

Stage 1 (pretraining): F and D minimize mean_s[L] + lambda * mean_t[L] over
paired source/target minibatches; C is not touched.

Stage 2 (adversarial): per minibatch, the current per-sample target losses give
importance weights w (no gradient through them); then one backward pass over

    mean_s[L] + lambda * mean_t[w * L]                       (F, D)
  - (mean_t[w * log C(F(x))] + mean_s[log(1 - C(F(x)))])     (C, and F through the reversal layer)

is followed by one Adam step for the F+D group and one for C. The reversal
layer scales the adversarial gradient reaching F by -w_adloss.

The trainer only ever sees a `TrainingView`: target labels cannot reach it.
Held-out metrics come from an `EpochMonitor` supplied by the caller.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from transfer.exceptions import ConfigError, DimensionError, DivergenceError, NonFiniteError
from transfer.services import tensor_engine as te
from transfer.services.checkpoint import save_checkpoint
from transfer.services.datasets import TrainingView, minibatch_indices, minibatch_iter
from transfer.services.networks import (
    ArchConfig,
    ModelBundle,
    build_bundle,
    forward_autoencode,
    forward_domain,
    reconstruction_losses,
)
from transfer.services.tensor_engine import AdamState, Tensor
from transfer.services.weighting import WeightConfig, calibrated, compute_weights, write_weight_dump

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# log arguments of the adversarial objective are clamped to [LOG_EPS, 1 - LOG_EPS]
LOG_EPS = 1e-7

PRETRAIN = "pretrain"
ADVERSARIAL = "adversarial"


@dataclass(frozen=True)
class TrainConfig:
    lambda_: float = 0.5
    w_adloss: float = 1.0
    lr: float = 0.01
    batch_size: int = 64
    pretrain_epochs: int = 20
    adversarial_epochs: int = 60
    seed: int = 0
    arch: str = "mlp"
    weight_cfg: WeightConfig = field(default_factory=WeightConfig)
    recalibrate_every: int = 0
    leaky_slope: float = 0.2
    dropout: float = 0.5
    decoder_sigmoid: Optional[bool] = None
    checkpoint_every: int = 0
    snapshot_every: int = 10
    dtype: str = "float64"

    def __post_init__(self):
        if not 0.0 <= self.lambda_ <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lambda_}")
        if self.w_adloss < 0:
            raise ConfigError(f"w_adloss must be >= 0, got {self.w_adloss}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if self.batch_size < 2:
            raise ConfigError(f"batch size must be >= 2 (batch normalization), got {self.batch_size}")
        for name in ("pretrain_epochs", "adversarial_epochs", "recalibrate_every", "checkpoint_every", "snapshot_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.pretrain_epochs + self.adversarial_epochs < 1:
            raise ConfigError("at least one epoch must run")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        te.resolve_dtype(self.dtype)

    @property
    def total_epochs(self) -> int:
        return self.pretrain_epochs + self.adversarial_epochs

    def arch_config(self, input_shape: Tuple[int, ...]) -> ArchConfig:
        return ArchConfig(self.arch, tuple(input_shape), self.leaky_slope, self.dropout, self.decoder_sigmoid, self.dtype)

    def to_dict(self) -> dict:
        """Flat echo using the config-file key names."""
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("lambda_", "weight_cfg")}
        out["lambda"] = self.lambda_
        w = self.weight_cfg
        out.update(eta=w.eta, beta=w.beta, auto_calibrate=w.auto_calibrate, normalize_weights=w.normalize)
        return out

    @classmethod
    def from_mapping(cls, values: Mapping[str, object]) -> "TrainConfig":
        """Build from config-file keys (`lambda`, `eta`, `normalize_weights`, ...); absent keys keep defaults."""
        values = dict(values)
        weight_kwargs = {}
        for key, attr in (("eta", "eta"), ("beta", "beta"), ("auto_calibrate", "auto_calibrate"),
                          ("normalize_weights", "normalize")):
            if key in values:
                weight_kwargs[attr] = values.pop(key)
        if "lambda" in values:
            values["lambda_"] = values.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown training keys: {', '.join(unknown)}")
        return cls(weight_cfg=WeightConfig(**weight_kwargs), **values)


@dataclass
class EpochRecord:
    stage: str
    epoch: int
    source_recon: float
    target_recon: float
    adversarial_loss: float = math.nan
    domain_accuracy: float = math.nan
    raw_weight_mean: float = math.nan
    eta: float = math.nan
    beta: float = math.nan
    extra: Dict[str, float] = field(default_factory=dict)

    def to_row(self) -> dict:
        row = {k: v for k, v in asdict(self).items() if k != "extra"}
        row.update(self.extra)
        return row


@dataclass
class LossReport:
    records: List[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: EpochRecord) -> None:
        self.records.append(record)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.to_row() for r in self.records])

    def column(self, name: str) -> np.ndarray:
        return np.array([r.to_row().get(name, math.nan) for r in self.records], dtype=np.float64)

    def stage(self, stage: str) -> "LossReport":
        return LossReport([r for r in self.records if r.stage == stage])


class EpochMonitor(Protocol):
    """Observes the bundle after every epoch; metrics it returns join the epoch record."""

    def on_epoch(self, epoch: int, stage: str, bundle: ModelBundle) -> Dict[str, float]:
        ...

    def finalize(self, bundle: ModelBundle):
        ...


@dataclass
class TrainState:
    bundle: ModelBundle
    ae_opt: AdamState
    cls_opt: AdamState
    rng: np.random.Generator
    weight_cfg: WeightConfig

    @classmethod
    def create(cls, cfg: TrainConfig, input_shape: Tuple[int, ...]) -> "TrainState":
        bundle = build_bundle(cfg.arch_config(input_shape), cfg.seed, grl_coefficient=cfg.w_adloss)
        return cls(
            bundle=bundle,
            ae_opt=AdamState.for_params(bundle.autoencoder_parameters(), lr=cfg.lr),
            cls_opt=AdamState.for_params(bundle.classifier_parameters(), lr=cfg.lr),
            rng=te.make_rng(cfg.seed, "train"),
            weight_cfg=cfg.weight_cfg,
        )


@dataclass
class PipelineResult:
    bundle: ModelBundle
    losses: LossReport
    evaluation: Optional[object] = None
    weight_cfg: Optional[WeightConfig] = None


@dataclass(frozen=True)
class AdversarialTerms:
    """Per-sample terms of the weighted adversarial objective (before averaging)."""

    source: np.ndarray
    target: np.ndarray

    @property
    def objective(self) -> float:
        return float(self.target.mean() + self.source.mean())


# ---------- losses ----------

def _joint_batch(bundle: ModelBundle, src: np.ndarray, tgt: np.ndarray) -> Tensor:
    dtype = te.resolve_dtype(bundle.arch.dtype)
    return Tensor(np.concatenate([src, tgt]), dtype=dtype)


def domain_loss(probs: Tensor, n_source: int, weights: np.ndarray) -> Tuple[Tensor, AdversarialTerms]:
    """
    Negated weighted adversarial objective, i.e. the loss C descends:
    -(mean_t[w * log p_t] + mean_s[log(1 - p_s)]).
    `probs` holds the source rows first, then the target rows.
    """
    p_s, p_t = te.split_rows(probs, n_source)
    weights = np.asarray(weights, dtype=probs.values.dtype).reshape(-1)
    if weights.shape != (p_t.shape[0],):
        raise DimensionError(f"{weights.size} weights for a target batch of {p_t.shape[0]}")
    target_terms = Tensor(weights) * p_t.clip(LOG_EPS, 1.0 - LOG_EPS).log()
    source_terms = (1.0 - p_s).clip(LOG_EPS, 1.0 - LOG_EPS).log()
    loss = -(target_terms.mean() + source_terms.mean())
    return loss, AdversarialTerms(source_terms.values.copy(), target_terms.values.copy())


def weighted_adversarial_loss(
    bundle: ModelBundle,
    src_batch: np.ndarray,
    tgt_batch: np.ndarray,
    weights,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[Tensor, AdversarialTerms]:
    """(loss_C, per-sample terms) for one pair of batches; loss_C is recorded for backward."""
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if weights.shape[0] != len(tgt_batch):
        raise DimensionError(f"{weights.shape[0]} weights for a target batch of {len(tgt_batch)}")
    x = _joint_batch(bundle, src_batch, tgt_batch)
    features = bundle.encoder.forward(x, training, rng)
    probs = forward_domain(bundle, features, training, rng)
    return domain_loss(probs, len(src_batch), weights)


def pretrain_loss(
    bundle: ModelBundle,
    src_batch: np.ndarray,
    tgt_batch: np.ndarray,
    lambda_: float,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[Tensor, Tensor, Tensor]:
    """(mean_s[L] + lambda * mean_t[L], per-sample source L, per-sample target L)."""
    x = _joint_batch(bundle, src_batch, tgt_batch)
    _, recon = forward_autoencode(bundle, x, training=training, rng=rng)
    l_s, l_t = te.split_rows(te.mse_per_sample(recon, x), len(src_batch))
    return l_s.mean() + lambda_ * l_t.mean(), l_s, l_t


def _accuracy(probs: np.ndarray, n_source: int) -> float:
    truth = np.concatenate([np.zeros(n_source), np.ones(probs.size - n_source)])
    return float(np.mean((probs > 0.5) == truth))


# ---------- epochs ----------

def pretrain_epoch(state: TrainState, data: TrainingView, cfg: TrainConfig, epoch: int) -> EpochRecord:
    bundle = state.bundle
    params = bundle.autoencoder_parameters()
    src_losses: List[float] = []
    tgt_losses: List[float] = []
    for batch, (src, tgt) in enumerate(minibatch_iter(data, cfg.batch_size, cfg.seed, epoch)):
        try:
            loss, l_s, l_t = pretrain_loss(bundle, src, tgt, cfg.lambda_, training=True, rng=state.rng)
            te.zero_grad(params)
            te.backward(loss)
            te.adam_step(params, state.ae_opt)
        except NonFiniteError as exc:
            raise DivergenceError(PRETRAIN, epoch, batch, str(exc)) from exc
        src_losses.append(float(l_s.values.mean()))
        tgt_losses.append(float(l_t.values.mean()))
        logger.debug("pretrain epoch %d batch %d loss=%.6g", epoch, batch, loss.item())
    return EpochRecord(PRETRAIN, epoch, float(np.mean(src_losses)), float(np.mean(tgt_losses)))


def adversarial_epoch(state: TrainState, data: TrainingView, cfg: TrainConfig, epoch: int) -> EpochRecord:
    bundle = state.bundle
    ae_params = bundle.autoencoder_parameters()
    cls_params = bundle.classifier_parameters()
    src_losses: List[float] = []
    tgt_losses: List[float] = []
    adv_losses: List[float] = []
    accuracies: List[float] = []
    raw_means: List[float] = []
    for batch, (src, tgt) in enumerate(minibatch_iter(data, cfg.batch_size, cfg.seed, epoch)):
        n_s = len(src)
        try:
            x = _joint_batch(bundle, src, tgt)
            features, recon = forward_autoencode(bundle, x, training=True, rng=state.rng)
            l_s, l_t = te.split_rows(te.mse_per_sample(recon, x), n_s)
            # weights from the detached losses of this very forward pass
            weights = compute_weights(l_t.values, state.weight_cfg)
            recon_loss = l_s.mean() + cfg.lambda_ * (Tensor(weights.normalized) * l_t).mean()
            probs = forward_domain(bundle, features, training=True, rng=state.rng)
            adv_loss, _ = domain_loss(probs, n_s, weights.normalized)
            total = recon_loss + adv_loss
            te.zero_grad(ae_params + cls_params)
            te.backward(total)
            te.adam_step(ae_params, state.ae_opt)
            te.adam_step(cls_params, state.cls_opt)
        except NonFiniteError as exc:
            raise DivergenceError(ADVERSARIAL, epoch, batch, str(exc)) from exc
        src_losses.append(float(l_s.values.mean()))
        tgt_losses.append(float(l_t.values.mean()))
        adv_losses.append(adv_loss.item())
        accuracies.append(_accuracy(probs.values, n_s))
        raw_means.append(float(weights.raw.mean()))
        logger.debug("adversarial epoch %d batch %d recon=%.6g adv=%.6g", epoch, batch, recon_loss.item(), adv_loss.item())
    return EpochRecord(
        ADVERSARIAL, epoch,
        source_recon=float(np.mean(src_losses)),
        target_recon=float(np.mean(tgt_losses)),
        adversarial_loss=float(np.mean(adv_losses)),
        domain_accuracy=float(np.mean(accuracies)),
        raw_weight_mean=float(np.mean(raw_means)),
        eta=state.weight_cfg.eta,
        beta=state.weight_cfg.beta,
    )


# ---------- pipeline ----------

def _recalibrate(state: TrainState, data: TrainingView) -> None:
    state.weight_cfg = calibrated(state.weight_cfg, reconstruction_losses(state.bundle, data.target))


def _is_due(every: int, epoch: int) -> bool:
    return every > 0 and (epoch + 1) % every == 0


def _dump_weights(state: TrainState, data: TrainingView, out_dir: Path, epoch: int) -> None:
    losses = reconstruction_losses(state.bundle, data.target)
    write_weight_dump(out_dir / f"weights_epoch{epoch:03d}.csv", losses, compute_weights(losses, state.weight_cfg))


def run_pipeline(
    cfg: TrainConfig,
    data: TrainingView,
    monitor: Optional[EpochMonitor] = None,
    out_dir: Optional[PathLike] = None,
) -> PipelineResult:
    """
    `pretrain_epochs` of stage 1, calibration of (eta, beta) on the training
    target losses, then `adversarial_epochs` of stage 2. Epochs are numbered
    globally from 0. With `out_dir`, writes metrics.csv, model.npz, periodic
    checkpoints and stage-2 weight dumps.
    """
    if not isinstance(data, TrainingView):
        raise TypeError(f"run_pipeline takes a TrainingView, got {type(data).__name__}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    state = TrainState.create(cfg, data.feature_shape)
    report = LossReport()
    logger.info(
        "training %s model: %d source, %d target samples, %d+%d epochs, seed %d",
        cfg.arch, data.n_source, data.n_target, cfg.pretrain_epochs, cfg.adversarial_epochs, cfg.seed,
    )

    def finish_epoch(record: EpochRecord) -> None:
        if monitor is not None:
            record.extra.update(monitor.on_epoch(record.epoch, record.stage, state.bundle))
        report.append(record)
        logger.info(
            "[%s] epoch %03d source=%.6f target=%.6f adv=%.4f acc=%.3f",
            record.stage, record.epoch, record.source_recon, record.target_recon,
            record.adversarial_loss, record.domain_accuracy,
        )
        if out is None:
            return
        if _is_due(cfg.checkpoint_every, record.epoch):
            save_checkpoint(out / f"checkpoint_epoch{record.epoch:03d}.npz", state.bundle, state.rng,
                            {"stage": record.stage, "epoch": record.epoch})
        if record.stage == ADVERSARIAL and _is_due(cfg.snapshot_every, record.epoch):
            _dump_weights(state, data, out, record.epoch)

    for epoch in range(cfg.pretrain_epochs):
        finish_epoch(pretrain_epoch(state, data, cfg, epoch))

    if cfg.adversarial_epochs:
        _recalibrate(state, data)
    for k in range(cfg.adversarial_epochs):
        epoch = cfg.pretrain_epochs + k
        if k > 0 and cfg.recalibrate_every > 0 and k % cfg.recalibrate_every == 0:
            _recalibrate(state, data)
        finish_epoch(adversarial_epoch(state, data, cfg, epoch))

    evaluation = monitor.finalize(state.bundle) if monitor is not None else None
    if out is not None:
        report.to_frame().to_csv(out / "metrics.csv", index=False, float_format="%.10g")
        save_checkpoint(out / "model.npz", state.bundle, state.rng,
                        {"stage": "final", "epochs": cfg.total_epochs, "config": cfg.to_dict()})
    return PipelineResult(state.bundle, report, evaluation, state.weight_cfg)


# ---------- plain autoencoder (baselines) ----------

def autoencoder_epoch(state: TrainState, samples: np.ndarray, cfg: TrainConfig, epoch: int, stage: str) -> EpochRecord:
    """One unweighted reconstruction epoch of F and D over a single sample set."""
    bundle = state.bundle
    params = bundle.autoencoder_parameters()
    losses: List[float] = []
    for batch, (idx, _) in enumerate(minibatch_indices(len(samples), len(samples), cfg.batch_size, cfg.seed, epoch)):
        try:
            x = Tensor(samples[idx], dtype=te.resolve_dtype(bundle.arch.dtype))
            _, recon = forward_autoencode(bundle, x, training=True, rng=state.rng)
            loss = te.mse_per_sample(recon, x).mean()
            te.zero_grad(params)
            te.backward(loss)
            te.adam_step(params, state.ae_opt)
        except NonFiniteError as exc:
            raise DivergenceError(stage, epoch, batch, str(exc)) from exc
        losses.append(loss.item())
    mean = float(np.mean(losses))
    return EpochRecord(stage, epoch, source_recon=mean if stage == "source" else math.nan,
                       target_recon=math.nan if stage == "source" else mean)


def fit_autoencoder(
    cfg: TrainConfig,
    input_shape: Tuple[int, ...],
    stages: Sequence[Tuple[str, np.ndarray, int]],
) -> Tuple[ModelBundle, LossReport]:
    """
    Train only F and D through consecutive (name, samples, epochs) stages,
    with the same initialization, optimizer and batching as `run_pipeline`.
    """
    state = TrainState.create(cfg, input_shape)
    report = LossReport()
    epoch = 0
    for name, samples, epochs in stages:
        if epochs and len(samples) < 2:
            raise ConfigError(f"stage {name!r} has {len(samples)} samples, at least 2 are needed")
        for _ in range(epochs):
            record = autoencoder_epoch(state, samples, cfg, epoch, name)
            report.append(record)
            logger.info("[%s] epoch %03d recon=%.6f", name, epoch,
                        record.source_recon if name == "source" else record.target_recon)
            epoch += 1
    return state.bundle, report
