"""
Anomaly-transfer tasks.

Source domain: normal samples only. Target domain: an unlabeled mixture of
normals and anomalies at a controlled anomaly rate. Target labels are kept for
evaluation, never handed to the trainer: the trainer only accepts a
`TrainingView`, which has no label field.

Data sources:
- IDX files (MNIST/USPS layout), gzip or plain;
- CSV files ``label,px0,...,pxk``;
- a synthetic 2-D (or D-dimensional) generator with a rotation + translation
  shift between domains and a distant anomaly cluster.

Datasets are saved as ``dataset.npz`` + ``manifest.json`` (provenance).
"""
from __future__ import annotations

import gzip
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from PIL import Image
from sklearn.model_selection import train_test_split

from transfer.exceptions import ConfigError, DatasetError, DatasetFormatError, DimensionError
from transfer.services.tensor_engine import make_rng

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

NORMAL = 0
ANOMALY = 1

DATASET_FILE = "dataset.npz"
MANIFEST_FILE = "manifest.json"


# ---------- types ----------

@dataclass(frozen=True)
class TrainingView:
    """What the trainer may see: samples of both domains, nothing else."""

    source: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        for name in ("source", "target"):
            if getattr(self, name).shape[0] == 0:
                raise DatasetError(f"the {name} domain has no samples to train on")
        if self.source.shape[1:] != self.target.shape[1:]:
            raise DimensionError(f"source samples {self.source.shape[1:]} vs target samples {self.target.shape[1:]}")

    @property
    def feature_shape(self) -> Tuple[int, ...]:
        return tuple(self.source.shape[1:])

    @property
    def n_source(self) -> int:
        return int(self.source.shape[0])

    @property
    def n_target(self) -> int:
        return int(self.target.shape[0])


@dataclass(frozen=True)
class EvalSet:
    """Held-out samples for evaluation; target_labels is None for unlabeled data."""

    source: np.ndarray
    target: np.ndarray
    target_labels: Optional[np.ndarray]

    @property
    def has_labels(self) -> bool:
        return self.target_labels is not None

    def target_population(self, label: int) -> np.ndarray:
        if self.target_labels is None:
            raise DatasetError("target labels are not available")
        return self.target[self.target_labels == label]


@dataclass
class DomainDataset:
    source: np.ndarray
    target: np.ndarray
    target_eval_labels: Optional[np.ndarray] = None
    provenance: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.source.shape[1:] != self.target.shape[1:]:
            raise DimensionError(f"source samples {self.source.shape[1:]} vs target samples {self.target.shape[1:]}")
        if self.target_eval_labels is not None:
            self.target_eval_labels = np.asarray(self.target_eval_labels, dtype=np.int64)
            if self.target_eval_labels.shape != (self.target.shape[0],):
                raise DimensionError(
                    f"{self.target_eval_labels.shape[0]} target labels for {self.target.shape[0]} target samples"
                )

    @property
    def feature_shape(self) -> Tuple[int, ...]:
        return tuple(self.source.shape[1:])

    @property
    def feature_dim(self) -> int:
        return int(np.prod(self.feature_shape))

    def training_view(self) -> TrainingView:
        return TrainingView(self.source, self.target)

    def eval_set(self) -> EvalSet:
        return EvalSet(self.source, self.target, self.target_eval_labels)


@dataclass(frozen=True)
class AnomalyTaskSpec:
    normal_class: int = 0
    anomaly_rate: float = 0.25
    n_source: int = 2000
    n_target: int = 2000
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.anomaly_rate < 1.0:
            raise ConfigError(f"anomaly rate must lie in (0, 1), got {self.anomaly_rate}")
        if self.n_source < 1 or self.n_target < 1:
            raise ConfigError("sample counts must be positive")


@dataclass(frozen=True)
class SynthConfig:
    """
    The cluster geometry lives in the first `dim` axes; `noise_dims` extra axes
    carry low-variance noise for normals and wider noise for anomalies, so a
    narrow code cannot reconstruct anomalies as well as normals.
    """

    dim: int = 2
    n_source: int = 600
    n_target: int = 600
    anomaly_rate: float = 0.25
    shift: float = 1.5
    rotation_deg: float = 30.0
    sigma: float = 0.4
    anomaly_distance: float = 6.0
    # per-axis scale of the normal cluster is sigma * aspect**axis, so rotations are visible
    aspect: float = 0.5
    anomaly_spread: float = 0.5
    noise_dims: int = 14
    # std along the extra axes, in units of sigma
    noise_sigma: float = 0.025
    anomaly_noise: float = 0.25

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigError(f"dim must be >= 1, got {self.dim}")
        if self.noise_dims < 0:
            raise ConfigError(f"noise_dims must be >= 0, got {self.noise_dims}")
        if not 0.0 <= self.anomaly_rate < 1.0:
            raise ConfigError(f"anomaly rate must lie in [0, 1), got {self.anomaly_rate}")
        if self.n_source < 1 or self.n_target < 1:
            raise ConfigError("sample counts must be positive")
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be > 0, got {self.sigma}")
        if self.noise_sigma < 0 or self.anomaly_noise < 0:
            raise ConfigError("noise scales must be >= 0")

    @property
    def n_features(self) -> int:
        return self.dim + self.noise_dims


def anomaly_count(rate: float, n: int) -> int:
    return int(math.floor(rate * n + 0.5))


# ---------- IDX ----------

IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
IDX_CODES = {np.dtype(v).newbyteorder("=").str: k for k, v in IDX_DTYPES.items()}


def _read_bytes(path: Path) -> bytes:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def parse_idx_bytes(data: bytes, origin: str = "<bytes>") -> np.ndarray:
    """Decode an IDX payload to its typed array (native byte order)."""
    if len(data) < 4:
        raise DatasetFormatError(f"{origin}: truncated IDX header", offset=len(data))
    zero, code, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0 or code not in IDX_DTYPES:
        raise DatasetFormatError(f"{origin}: bad IDX magic 0x{data[:4].hex()}", offset=0)
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DatasetFormatError(f"{origin}: truncated IDX dimension table", offset=len(data))
    dims = struct.unpack(f">{ndim}I", data[4:header])
    dtype = IDX_DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    available = len(data) - header
    if available < expected:
        raise DatasetFormatError(
            f"{origin}: truncated IDX payload, expected {expected} bytes, found {available}",
            offset=len(data),
        )
    if available > expected:
        raise DatasetFormatError(f"{origin}: {available - expected} trailing bytes after IDX payload", offset=header + expected)
    arr = np.frombuffer(data, dtype=dtype, count=expected // dtype.itemsize, offset=header)
    return arr.reshape(dims).astype(dtype.newbyteorder("="))


def parse_idx(path: PathLike) -> np.ndarray:
    """
    Read an IDX file. Unsigned-byte image tensors (3-D or more) come back as
    float64 scaled to [0, 1]; label vectors as int64; anything else unchanged.
    """
    path = Path(path)
    arr = parse_idx_bytes(_read_bytes(path), origin=str(path))
    if arr.ndim >= 3 and arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if arr.ndim == 1 and np.issubdtype(arr.dtype, np.integer):
        return arr.astype(np.int64)
    return arr


def idx_bytes(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if np.issubdtype(arr.dtype, np.floating) and arr.ndim >= 3:
        # images in [0, 1] go back to bytes
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    elif np.issubdtype(arr.dtype, np.integer) and arr.size and arr.min() >= 0 and arr.max() <= 255:
        arr = arr.astype(np.uint8)
    code = IDX_CODES.get(arr.dtype.newbyteorder("=").str)
    if code is None:
        raise DatasetFormatError(f"dtype {arr.dtype} has no IDX encoding")
    header = struct.pack(">HBB", 0, code, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + arr.astype(IDX_DTYPES[code]).tobytes()


def write_idx(path: PathLike, array: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = idx_bytes(array)
    if path.suffix == ".gz":
        # mtime=0 keeps the archive byte-identical across runs
        payload = gzip.compress(payload, mtime=0)
    with open(path, "wb") as fh:
        fh.write(payload)
    return path


def load_idx_pair(images_path: PathLike, labels_path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    images = parse_idx(images_path)
    labels = parse_idx(labels_path)
    if labels.ndim != 1:
        raise DatasetFormatError(f"{labels_path}: expected a 1-D label file, got {labels.ndim} dimensions")
    if labels.shape[0] != images.shape[0]:
        raise DatasetFormatError(f"{labels.shape[0]} labels in {labels_path} for {images.shape[0]} images in {images_path}")
    logger.info("loaded %d images %s from %s", images.shape[0], images.shape[1:], images_path)
    return images, labels


# ---------- image preparation ----------

def resize_images(images: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of N x H x W images to N x size x size, values kept in [0, 1]."""
    if images.ndim != 3:
        raise DimensionError(f"expected N x H x W images, got shape {images.shape}")
    if images.shape[1:] == (size, size):
        return images.astype(np.float64)
    out = np.empty((images.shape[0], size, size), dtype=np.float64)
    for i, img in enumerate(images):
        resized = Image.fromarray(img.astype(np.float32)).resize((size, size), Image.Resampling.BILINEAR)
        out[i] = np.asarray(resized, dtype=np.float64)
    return np.clip(out, 0.0, 1.0)


def to_channels(images: np.ndarray, rgb: bool = False) -> np.ndarray:
    """N x H x W -> N x C x H x W with C = 3 (replicated) or 1."""
    if images.ndim != 3:
        raise DimensionError(f"expected N x H x W images, got shape {images.shape}")
    stacked = images[:, None, :, :]
    return np.repeat(stacked, 3, axis=1) if rgb else stacked


# ---------- CSV ----------

def read_csv_dataset(path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    """``label,px0..pxk`` with a header row -> (samples N x k+1, labels)."""
    try:
        frame = pd.read_csv(path)
    except pd.errors.ParserError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from exc
    if "label" not in frame.columns:
        raise DatasetFormatError(f"{path}: no 'label' column in header {list(frame.columns)[:5]}")
    features = frame.drop(columns="label")
    if features.shape[1] == 0:
        raise DatasetFormatError(f"{path}: no feature columns")
    try:
        samples = features.to_numpy(dtype=np.float64)
        labels = frame["label"].to_numpy(dtype=np.int64)
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: non-numeric value ({exc})") from exc
    return samples, labels


def write_csv_dataset(path: PathLike, samples: np.ndarray, labels: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    flat = np.asarray(samples).reshape(len(samples), -1)
    frame = pd.DataFrame(flat, columns=[f"px{i}" for i in range(flat.shape[1])])
    frame.insert(0, "label", np.asarray(labels, dtype=np.int64))
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


# ---------- task construction ----------

@dataclass(frozen=True)
class TaskHalf:
    samples: np.ndarray
    eval_labels: Optional[np.ndarray]
    indices: np.ndarray


def _pick(pool: np.ndarray, count: int, what: str, rng: np.random.Generator) -> np.ndarray:
    if count > pool.size:
        raise DatasetError(f"need {count} {what} samples, only {pool.size} available (short by {count - pool.size})")
    return rng.choice(pool, size=count, replace=False)


def build_anomaly_task(
    images: np.ndarray,
    labels: np.ndarray,
    spec: AnomalyTaskSpec,
    role: str = "target",
    exclude: Optional[np.ndarray] = None,
) -> TaskHalf:
    """
    Source half: `spec.n_source` samples of the normal class.
    Target half: `spec.n_target` samples, round(rate * n_target) of them from
    other classes; eval labels are 0 for normal and 1 for anomaly.
    """
    if role not in ("source", "target"):
        raise ConfigError(f"role must be 'source' or 'target', got {role!r}")
    labels = np.asarray(labels)
    available = np.ones(labels.shape[0], dtype=bool)
    if exclude is not None:
        available[np.asarray(exclude, dtype=np.int64)] = False
    normal_pool = np.flatnonzero(available & (labels == spec.normal_class))
    other_pool = np.flatnonzero(available & (labels != spec.normal_class))
    rng = make_rng(spec.seed, "task", role)

    if role == "source":
        idx = np.sort(_pick(normal_pool, spec.n_source, f"class-{spec.normal_class} source", rng))
        return TaskHalf(images[idx], None, idx)

    n_anomaly = anomaly_count(spec.anomaly_rate, spec.n_target)
    normals = _pick(normal_pool, spec.n_target - n_anomaly, f"class-{spec.normal_class} target", rng)
    anomalies = _pick(other_pool, n_anomaly, "anomalous target", rng)
    idx = np.concatenate([normals, anomalies])
    eval_labels = np.concatenate([np.full(normals.size, NORMAL), np.full(anomalies.size, ANOMALY)]).astype(np.int64)
    order = rng.permutation(idx.size)
    return TaskHalf(images[idx[order]], eval_labels[order], idx[order])


def assemble_task(source: TaskHalf, target: TaskHalf, provenance: Optional[dict] = None) -> DomainDataset:
    prov = dict(provenance or {})
    prov.setdefault("n_source", int(source.samples.shape[0]))
    prov.setdefault("n_target", int(target.samples.shape[0]))
    if target.eval_labels is not None:
        realized = int(np.sum(target.eval_labels == ANOMALY))
        prov["realized_anomalies"] = realized
        prov["realized_anomaly_rate"] = realized / max(int(target.samples.shape[0]), 1)
    return DomainDataset(source.samples, target.samples, target.eval_labels, prov)


def transfer_task(
    source_images: np.ndarray,
    source_labels: np.ndarray,
    target_images: np.ndarray,
    target_labels: np.ndarray,
    spec: AnomalyTaskSpec,
    same_domain: bool = False,
    provenance: Optional[dict] = None,
) -> DomainDataset:
    """Both halves of a task; with `same_domain` the target never reuses source samples."""
    src = build_anomaly_task(source_images, source_labels, spec, role="source")
    tgt = build_anomaly_task(
        target_images, target_labels, spec, role="target", exclude=src.indices if same_domain else None
    )
    prov = {"normal_class": spec.normal_class, "anomaly_rate": spec.anomaly_rate, "seed": spec.seed}
    prov.update(provenance or {})
    return assemble_task(src, tgt, prov)


def _rotation(dim: int, degrees: float) -> np.ndarray:
    rot = np.eye(dim)
    if dim >= 2:
        a = np.deg2rad(degrees)
        rot[:2, :2] = [[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]]
    return rot


def synth_domain_pair(cfg: SynthConfig, seed: int) -> DomainDataset:
    """
    Source normals ~ N(0, diag(sigma * aspect**axis)^2) in the first `dim`
    axes. Target normals are the same distribution rotated by `rotation_deg`
    and translated by `shift` along the first axis. Target anomalies sit
    `anomaly_distance * sigma` away from the source mean along the second axis
    (the first, negated, in 1-D). Along the `noise_dims` extra axes normals of
    both domains have std `noise_sigma * sigma`, anomalies `anomaly_noise * sigma`.
    """
    rng = make_rng(seed, "synth")
    scales = cfg.sigma * cfg.aspect ** np.arange(cfg.dim)

    def with_noise(points: np.ndarray, scale: float) -> np.ndarray:
        noise = rng.normal(0.0, scale * cfg.sigma, size=(points.shape[0], cfg.noise_dims))
        return np.hstack([points, noise])

    source = with_noise(rng.normal(0.0, 1.0, size=(cfg.n_source, cfg.dim)) * scales, cfg.noise_sigma)

    n_anomaly = anomaly_count(cfg.anomaly_rate, cfg.n_target)
    n_normal = cfg.n_target - n_anomaly
    translation = np.zeros(cfg.dim)
    translation[0] = cfg.shift
    normals = (rng.normal(0.0, 1.0, size=(n_normal, cfg.dim)) * scales) @ _rotation(cfg.dim, cfg.rotation_deg).T
    normals = with_noise(normals + translation, cfg.noise_sigma)

    center = np.zeros(cfg.dim)
    if cfg.dim >= 2:
        center[1] = cfg.anomaly_distance * cfg.sigma
    else:
        center[0] = -cfg.anomaly_distance * cfg.sigma
    anomalies = center + rng.normal(0.0, cfg.anomaly_spread * cfg.sigma, size=(n_anomaly, cfg.dim))
    anomalies = with_noise(anomalies, cfg.anomaly_noise)

    target = np.concatenate([normals, anomalies])
    labels = np.concatenate([np.full(n_normal, NORMAL), np.full(n_anomaly, ANOMALY)]).astype(np.int64)
    order = rng.permutation(cfg.n_target)
    provenance = {"generator": "synthetic", "seed": int(seed), **asdict(cfg), "realized_anomalies": n_anomaly,
                  "realized_anomaly_rate": n_anomaly / cfg.n_target}
    return DomainDataset(source, target[order], labels[order], provenance)


@dataclass(frozen=True, eq=False)
class TaskRecipe:
    """
    How to rebuild a task for another anomaly rate or seed (sweeps, repeats).
    Exactly one of `synth`, `arrays` + `task`, or `fixed` is set; `arrays` is
    (source images, source labels, target images, target labels).
    """

    synth: Optional[SynthConfig] = None
    arrays: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = None
    task: Optional[AnomalyTaskSpec] = None
    same_domain: bool = False
    fixed: Optional[DomainDataset] = None

    def __post_init__(self):
        given = sum(x is not None for x in (self.synth, self.arrays, self.fixed))
        if given != 1:
            raise ConfigError("a task recipe needs exactly one of synth, arrays, fixed")
        if self.arrays is not None and self.task is None:
            raise ConfigError("an array-backed recipe needs an AnomalyTaskSpec")

    def build(self, seed: int, anomaly_rate: Optional[float] = None) -> DomainDataset:
        if self.fixed is not None:
            if anomaly_rate is not None:
                raise ConfigError("a fixed dataset cannot be rebuilt at another anomaly rate")
            return self.fixed
        if self.synth is not None:
            cfg = self.synth if anomaly_rate is None else replace(self.synth, anomaly_rate=anomaly_rate)
            return synth_domain_pair(cfg, seed)
        task = replace(self.task, seed=seed, **({} if anomaly_rate is None else {"anomaly_rate": anomaly_rate}))
        src_x, src_y, tgt_x, tgt_y = self.arrays
        return transfer_task(src_x, src_y, tgt_x, tgt_y, task, same_domain=self.same_domain)


# ---------- batching / splitting ----------

def _index_stream(n: int, length: int, rng: np.random.Generator) -> np.ndarray:
    chunks: List[np.ndarray] = []
    total = 0
    while total < length:
        chunks.append(rng.permutation(n))
        total += n
    return np.concatenate(chunks)[:length]


def minibatch_indices(n_source: int, n_target: int, batch_size: int, seed: int, epoch: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    Paired index batches for one epoch: ceil(max(n_s, n_t) / batch_size)
    batches, each with exactly batch_size rows per domain. Each domain is an
    independent stream of seeded permutations; the shorter one recycles.
    """
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    if n_source < 1 or n_target < 1:
        raise DatasetError(f"cannot batch an empty domain ({n_source} source, {n_target} target samples)")
    n_batches = math.ceil(max(n_source, n_target) / batch_size)
    length = n_batches * batch_size
    src = _index_stream(n_source, length, make_rng(seed, "minibatch", epoch, "source"))
    tgt = _index_stream(n_target, length, make_rng(seed, "minibatch", epoch, "target"))
    return [(src[i:i + batch_size], tgt[i:i + batch_size]) for i in range(0, length, batch_size)]


def minibatch_iter(data: TrainingView, batch_size: int, seed: int, epoch: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    for src_idx, tgt_idx in minibatch_indices(data.n_source, data.n_target, batch_size, seed, epoch):
        yield data.source[src_idx], data.target[tgt_idx]


def _split(n: int, fraction: float, seed: int, stratify: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    idx = np.arange(n)
    if stratify is not None:
        _, counts = np.unique(stratify, return_counts=True)
        if counts.size < 2 or counts.min() < 2:
            stratify = None
    train_idx, eval_idx = train_test_split(idx, test_size=fraction, random_state=seed, stratify=stratify)
    return np.sort(train_idx), np.sort(eval_idx)


def split_dataset(dataset: DomainDataset, eval_fraction: float = 0.5, seed: int = 0) -> Tuple[DomainDataset, EvalSet]:
    """Split both domains; the target split is stratified on the eval labels."""
    if not 0.0 < eval_fraction < 1.0:
        raise ConfigError(f"eval fraction must lie in (0, 1), got {eval_fraction}")
    s_train, s_eval = _split(dataset.source.shape[0], eval_fraction, seed)
    t_train, t_eval = _split(dataset.target.shape[0], eval_fraction, seed, dataset.target_eval_labels)
    labels = dataset.target_eval_labels
    train = DomainDataset(dataset.source[s_train], dataset.target[t_train],
                          None if labels is None else labels[t_train], dict(dataset.provenance))
    held_out = EvalSet(dataset.source[s_eval], dataset.target[t_eval], None if labels is None else labels[t_eval])
    return train, held_out


def holdout_split(dataset: DomainDataset, eval_fraction: float = 0.5, seed: int = 0) -> Tuple[TrainingView, EvalSet]:
    train, held_out = split_dataset(dataset, eval_fraction, seed)
    return train.training_view(), held_out


def normals_only(dataset: DomainDataset) -> DomainDataset:
    """The task with its target restricted to labelled normals (oracle baseline)."""
    if dataset.target_eval_labels is None:
        raise DatasetError("an oracle view needs target labels")
    keep = dataset.target_eval_labels == NORMAL
    return DomainDataset(dataset.source, dataset.target[keep], dataset.target_eval_labels[keep],
                         {**dataset.provenance, "view": "target_normals_only"})


# ---------- persistence ----------

def save_dataset(out_dir: PathLike, dataset: DomainDataset, run: Optional[dict] = None) -> Path:
    """Writes dataset.npz and the directory manifest; `run` (command, timings, build) joins the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arrays = {"source": dataset.source, "target": dataset.target}
    if dataset.target_eval_labels is not None:
        arrays["target_labels"] = dataset.target_eval_labels
    with open(out / DATASET_FILE, "wb") as fh:
        np.savez(fh, **arrays)
    manifest = {
        "feature_shape": list(dataset.feature_shape),
        "n_source": int(dataset.source.shape[0]),
        "n_target": int(dataset.target.shape[0]),
        "has_labels": dataset.target_eval_labels is not None,
        "provenance": dataset.provenance,
    }
    if run is not None:
        manifest["run"] = run
    with open(out / MANIFEST_FILE, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
    logger.info("dataset written to %s (%d source, %d target)", out, manifest["n_source"], manifest["n_target"])
    return out


def load_dataset(path: PathLike) -> DomainDataset:
    """Accepts the dataset directory or its dataset.npz."""
    path = Path(path)
    npz = path / DATASET_FILE if path.is_dir() else path
    manifest_path = npz.parent / MANIFEST_FILE
    with np.load(npz, allow_pickle=False) as archive:
        if "source" not in archive.files or "target" not in archive.files:
            raise DatasetFormatError(f"{npz} lacks source/target arrays")
        source = archive["source"]
        target = archive["target"]
        labels = archive["target_labels"] if "target_labels" in archive.files else None
    provenance = {}
    if manifest_path.exists():
        with open(manifest_path, encoding="utf-8") as fh:
            provenance = json.load(fh).get("provenance", {})
    return DomainDataset(source, target, labels, provenance)
