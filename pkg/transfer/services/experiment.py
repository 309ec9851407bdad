"""
Plumbing shared by the management commands: experiment config files, run
manifests, phase timings and the plain-text summary table.

Config files use dotenv syntax (``key=value``, ``#`` comments). Every key must
be one of ``settings.TRANSFER_DEFAULTS``; absent keys take the documented
default, and command-line flags win over the file.
"""
from __future__ import annotations

import json
import logging
import subprocess
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Union

from django.conf import settings
from dotenv import dotenv_values

from transfer import __version__
from transfer.exceptions import ConfigError
from transfer.services.trainer import TrainConfig

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MANIFEST_NAME = "manifest.json"
# keys of TRANSFER_DEFAULTS that configure evaluation/experiments, not the trainer
RUN_KEYS = ("eval_fraction", "hist_bins", "repeats")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, raw: Any, default: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot read {raw!r} as {type(default).__name__}") from None
    return text


def parse_config_file(path: Optional[PathLike]) -> Dict[str, Any]:
    """Typed values of the keys present in the file (empty without a file)."""
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    defaults = settings.TRANSFER_DEFAULTS
    raw = dotenv_values(path)
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config keys in {path}: {', '.join(unknown)}")
    return {key: _coerce(key, value, defaults[key]) for key, value in raw.items() if value is not None}


def resolve_config(file_values: Mapping[str, Any], overrides: Optional[Mapping[str, Any]] = None) -> Dict[str, Any]:
    """defaults < file < flags. Flags left at None do not override."""
    resolved: Dict[str, Any] = {}
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    for key, default in settings.TRANSFER_DEFAULTS.items():
        if key in overrides:
            resolved[key] = _coerce(key, overrides[key], default)
        elif key in file_values:
            resolved[key] = file_values[key]
        else:
            logger.info("config key %s not set, using default %r", key, default)
            resolved[key] = default
    return resolved


def train_config(resolved: Mapping[str, Any]) -> TrainConfig:
    return TrainConfig.from_mapping({k: v for k, v in resolved.items() if k not in RUN_KEYS})


def parse_grid(text: str) -> List[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"grid {text!r} is not a comma-separated list of numbers") from None
    if not values:
        raise ConfigError("empty grid")
    return values


# ---------- manifests ----------

def build_identifier() -> str:
    """Package version, plus the short git hash when the tree is a checkout."""
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=settings.BASE_DIR, capture_output=True, text=True, timeout=5, check=True,
        )
        return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        return __version__


@dataclass
class RunManifest:
    command: str
    config: Dict[str, Any]
    seed: Optional[int] = None
    build: str = field(default_factory=build_identifier)
    outputs: Dict[str, str] = field(default_factory=dict)
    timings_ms: Dict[str, float] = field(default_factory=dict)
    extra: Dict[str, Any] = field(default_factory=dict)
    created_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds"))

    def add_output(self, name: str, path: PathLike) -> None:
        self.outputs[name] = str(path)

    def write(self, out_dir: PathLike) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / MANIFEST_NAME
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True, default=str)
        return path


@contextmanager
def timed(timings: Dict[str, float], phase: str) -> Iterator[None]:
    """Wall-clock milliseconds of the block, stored under `phase`."""
    t0 = time.perf_counter()
    try:
        yield
    finally:
        timings[phase] = round((time.perf_counter() - t0) * 1000.0, 3)


# ---------- console output ----------

def format_table(headers: Sequence[str], rows: Sequence[Sequence[Any]], title: str = "") -> str:
    """Fixed-width table, columns padded to their widest cell."""
    cells = [[_cell(v) for v in row] for row in rows]
    widths = [len(h) for h in headers]
    for row in cells:
        for i, val in enumerate(row):
            widths[i] = max(widths[i], len(val))

    def fmt_row(row):
        return " | ".join(str(val).ljust(widths[i]) for i, val in enumerate(row))

    rule = "=" * max(len(fmt_row(headers)), len(title))
    lines = [rule]
    if title:
        lines += [title, rule]
    lines += [fmt_row(headers), "-+-".join("-" * w for w in widths)]
    lines += [fmt_row(row) for row in cells]
    return "\n".join(lines)


def _cell(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)
