"""Arguments and error mapping shared by the transfer management commands."""
from __future__ import annotations

from contextlib import contextmanager
from typing import Any, Dict, Iterator

from django.conf import settings
from django.core.management.base import CommandError

from transfer.exceptions import (
    ConfigError,
    DatasetError,
    DatasetFormatError,
    DimensionError,
    DivergenceError,
    EvaluationError,
    NonFiniteError,
)
from transfer.services.datasets import (
    AnomalyTaskSpec,
    SynthConfig,
    TaskRecipe,
    load_dataset,
    load_idx_pair,
    read_csv_dataset,
    resize_images,
    to_channels,
)

EXIT_USAGE = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4

# config key -> (flag, type)
CONFIG_FLAGS = {
    "lambda": ("--lambda", float),
    "eta": ("--eta", float),
    "beta": ("--beta", float),
    "auto_calibrate": ("--auto-calibrate", str),
    "normalize_weights": ("--normalize-weights", str),
    "w_adloss": ("--w-adloss", float),
    "lr": ("--lr", float),
    "batch_size": ("--batch-size", int),
    "pretrain_epochs": ("--pretrain-epochs", int),
    "adversarial_epochs": ("--adversarial-epochs", int),
    "seed": ("--seed", int),
    "arch": ("--arch", str),
    "leaky_slope": ("--leaky-slope", float),
    "dropout": ("--dropout", float),
    "recalibrate_every": ("--recalibrate-every", int),
    "checkpoint_every": ("--checkpoint-every", int),
    "snapshot_every": ("--snapshot-every", int),
    "eval_fraction": ("--eval-fraction", float),
    "hist_bins": ("--hist-bins", int),
    "repeats": ("--repeats", int),
    "dtype": ("--dtype", str),
}


def add_config_arguments(parser) -> None:
    parser.add_argument("--config", default=None, help="key=value experiment file; flags below override it.")
    for key, (flag, kind) in CONFIG_FLAGS.items():
        parser.add_argument(flag, dest=f"cfg_{key}", type=kind, default=None,
                            help=f"overrides '{key}' (default {settings.TRANSFER_DEFAULTS[key]!r})")


def config_overrides(options: Dict[str, Any]) -> Dict[str, Any]:
    return {key: options.get(f"cfg_{key}") for key in CONFIG_FLAGS}


def add_task_arguments(parser) -> None:
    """Where a task comes from: a saved dataset, IDX/CSV files, or the synthetic generator."""
    parser.add_argument("--data", default=None, help="Saved dataset directory (gen_data output).")
    parser.add_argument("--source-images", default=None, help="IDX images of the source domain.")
    parser.add_argument("--source-labels", default=None, help="IDX labels of the source domain.")
    parser.add_argument("--target-images", default=None, help="IDX images of the target domain (default: source files).")
    parser.add_argument("--target-labels", default=None)
    parser.add_argument("--source-csv", default=None, help="CSV 'label,px0..pxk' of the source domain.")
    parser.add_argument("--target-csv", default=None, help="CSV of the target domain (default: source file).")
    parser.add_argument("--resize", type=int, default=None, help="Bilinear resize of IDX images to NxN (e.g. USPS 16 -> 28).")
    parser.add_argument("--rgb", action="store_true", help="Replicate image channels to RGB.")
    parser.add_argument("--normal-class", type=int, default=0)
    parser.add_argument("--anomaly-rate", type=float, default=None)
    parser.add_argument("--n-source", type=int, default=None)
    parser.add_argument("--n-target", type=int, default=None)
    parser.add_argument("--dim", type=int, default=None, help="Synthetic cluster dimension.")
    parser.add_argument("--noise-dims", type=int, default=None, help="Extra synthetic noise axes (0 keeps the plain clusters).")
    parser.add_argument("--anomaly-noise", type=float, default=None, help="Std of anomalies along the noise axes, in sigmas.")
    parser.add_argument("--shift", type=float, default=None, help="Synthetic translation magnitude.")
    parser.add_argument("--rotation", type=float, default=None, help="Synthetic rotation in degrees.")
    parser.add_argument("--sigma", type=float, default=None)
    parser.add_argument("--anomaly-distance", type=float, default=None, help="Distance of the anomaly cluster in sigmas.")


def _prepare_images(images, options):
    if images.ndim != 3:
        return images
    if options.get("resize"):
        images = resize_images(images, options["resize"])
    return to_channels(images, rgb=options.get("rgb", False))


def _given(options: Dict[str, Any], *names: str) -> Dict[str, Any]:
    return {name: options[key] for key, name in zip(names[::2], names[1::2]) if options.get(key) is not None}


def task_recipe(options: Dict[str, Any]) -> TaskRecipe:
    if options.get("data"):
        return TaskRecipe(fixed=load_dataset(options["data"]))

    counts = _given(options, "n_source", "n_source", "n_target", "n_target")
    rate = options.get("anomaly_rate")

    if options.get("source_images") or options.get("source_csv"):
        if options.get("source_images"):
            if not options.get("source_labels"):
                raise ConfigError("--source-images needs --source-labels")
            src_x, src_y = load_idx_pair(options["source_images"], options["source_labels"])
            same = not options.get("target_images")
            if same:
                tgt_x, tgt_y = src_x, src_y
            else:
                if not options.get("target_labels"):
                    raise ConfigError("--target-images needs --target-labels")
                tgt_x, tgt_y = load_idx_pair(options["target_images"], options["target_labels"])
            src_x, tgt_x = _prepare_images(src_x, options), _prepare_images(tgt_x, options)
            if src_x.shape[1:] != tgt_x.shape[1:]:
                raise ConfigError(f"source images {src_x.shape[1:]} and target images {tgt_x.shape[1:]} differ; use --resize")
        else:
            src_x, src_y = read_csv_dataset(options["source_csv"])
            same = not options.get("target_csv")
            tgt_x, tgt_y = (src_x, src_y) if same else read_csv_dataset(options["target_csv"])
        task = AnomalyTaskSpec(normal_class=options.get("normal_class", 0),
                               **({} if rate is None else {"anomaly_rate": rate}), **counts)
        return TaskRecipe(arrays=(src_x, src_y, tgt_x, tgt_y), task=task, same_domain=same)

    synth = _given(options, "dim", "dim", "shift", "shift", "rotation", "rotation_deg", "sigma", "sigma",
                   "anomaly_distance", "anomaly_distance", "anomaly_rate", "anomaly_rate",
                   "noise_dims", "noise_dims", "anomaly_noise", "anomaly_noise")
    return TaskRecipe(synth=SynthConfig(**synth, **counts))


@contextmanager
def command_errors() -> Iterator[None]:
    """Map service errors to exit codes: 2 usage/config, 3 divergence, 4 I/O or format."""
    try:
        yield
    except (DivergenceError, NonFiniteError) as exc:
        raise CommandError(str(exc), returncode=EXIT_DIVERGENCE) from exc
    except (ConfigError, DimensionError) as exc:
        raise CommandError(str(exc), returncode=EXIT_USAGE) from exc
    except (DatasetFormatError, DatasetError, EvaluationError, OSError) as exc:
        raise CommandError(str(exc), returncode=EXIT_IO) from exc


_DJANGO_OPTIONS = {"verbosity", "settings", "pythonpath", "traceback", "no_color", "force_color", "skip_checks"}


def echo_options(options: Dict[str, Any]) -> Dict[str, Any]:
    """Command options without Django's own flags, for manifests."""
    return {k: v for k, v in options.items() if k not in _DJANGO_OPTIONS}
