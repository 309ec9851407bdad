"""
Importance weights for target samples.

A target sample with reconstruction loss L gets the raw weight
``sigmoid(eta * L + beta)`` (eta < 0, beta > 0), so likely anomalies (large L)
weigh less. Raw weights are normalized per batch to mean 1 before they scale
the target terms of the training objective. Normalization runs on log-weights
(``log_expit`` then ``logsumexp``), so a batch whose raw weights all underflow
still gets finite relative weights. Weights are plain arrays: no gradient ever
flows through them.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import expit, log_expit, logsumexp

from transfer.exceptions import ConfigError, DimensionError, NonFiniteError

logger = logging.getLogger(__name__)

# Below this median loss the calibration would blow eta up; fall back to defaults.
CALIBRATION_FLOOR = 1e-12
DEFAULT_ETA = -1.0
DEFAULT_BETA = 1.0


@dataclass(frozen=True)
class WeightConfig:
    eta: float = DEFAULT_ETA
    beta: float = DEFAULT_BETA
    auto_calibrate: bool = True
    normalize: bool = True

    def __post_init__(self):
        if not self.eta < 0:
            raise ConfigError(f"eta must be < 0, got {self.eta}")
        if not self.beta > 0:
            raise ConfigError(f"beta must be > 0, got {self.beta}")


@dataclass(frozen=True)
class SampleWeights:
    raw: np.ndarray
    normalized: np.ndarray


def _as_losses(losses) -> np.ndarray:
    arr = np.asarray(losses, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("importance weighting")
    if np.any(arr < 0):
        raise ValueError("reconstruction losses must be >= 0")
    return arr


def _logits(losses, cfg: WeightConfig) -> np.ndarray:
    return cfg.eta * _as_losses(losses) + cfg.beta


def raw_weight(losses, cfg: WeightConfig) -> np.ndarray:
    """sigmoid(eta * L + beta) per sample."""
    return expit(_logits(losses, cfg))


def log_weight(losses, cfg: WeightConfig) -> np.ndarray:
    """log sigmoid(eta * L + beta), finite for any finite loss."""
    return log_expit(_logits(losses, cfg))


def normalize_log_weights(log_w) -> np.ndarray:
    """exp(log_w) rescaled to batch mean 1, computed without leaving log space."""
    log_w = np.asarray(log_w, dtype=np.float64).reshape(-1)
    if log_w.size == 0:
        raise DimensionError("cannot normalize an empty weight batch")
    if np.any(np.isnan(log_w)) or not np.any(np.isfinite(log_w)):
        raise NonFiniteError("weight normalization")
    return np.exp(log_w - logsumexp(log_w) + np.log(log_w.size))


def normalize_weights(raw) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64).reshape(-1)
    if np.any(raw < 0):
        raise ValueError("weights must be >= 0")
    with np.errstate(divide="ignore"):
        return normalize_log_weights(np.log(raw))


def compute_weights(losses, cfg: WeightConfig) -> SampleWeights:
    raw = raw_weight(losses, cfg)
    if not cfg.normalize:
        return SampleWeights(raw=raw, normalized=raw.copy())
    return SampleWeights(raw=raw, normalized=normalize_log_weights(log_weight(losses, cfg)))


def calibrate(pretrain_losses) -> Tuple[float, float]:
    """(eta, beta) placing the median target loss at raw weight 0.5, in loss units."""
    losses = _as_losses(pretrain_losses)
    if losses.size == 0:
        raise DimensionError("cannot calibrate on an empty loss vector")
    median = float(np.median(losses))
    if median <= CALIBRATION_FLOOR:
        logger.warning("median target loss %.3g below floor, keeping eta=%s beta=%s", median, DEFAULT_ETA, DEFAULT_BETA)
        return DEFAULT_ETA, DEFAULT_BETA
    eta = -1.0 / median
    beta = -eta * median
    return eta, beta


def calibrated(cfg: WeightConfig, pretrain_losses) -> WeightConfig:
    """cfg with eta/beta recalibrated when auto_calibrate is on, unchanged otherwise."""
    if not cfg.auto_calibrate:
        return cfg
    eta, beta = calibrate(pretrain_losses)
    logger.info("weights calibrated: eta=%.6g beta=%.6g", eta, beta)
    return replace(cfg, eta=eta, beta=beta)


def write_weight_dump(
    path: Union[str, Path],
    losses,
    weights: SampleWeights,
    sample_ids: Optional[np.ndarray] = None,
) -> Path:
    losses = _as_losses(losses)
    if losses.shape != weights.raw.shape:
        raise DimensionError(f"{losses.size} losses but {weights.raw.size} weights")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame({
        "sample_id": np.arange(losses.size) if sample_ids is None else np.asarray(sample_ids),
        "recon_loss": losses,
        "raw_weight": weights.raw,
        "normalized_weight": weights.normalized,
    })
    frame.to_csv(path, index=False, float_format="%.10g")
    return path
