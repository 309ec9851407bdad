"""
ModelBundle checkpoints.

A checkpoint is a NumPy ``.npz`` archive:

- one array per parameter and batch-norm buffer, named ``<stack>.<layer>.<name>``
  (e.g. ``encoder.0.weight``, ``decoder.1.running_var``);
- ``__arch__``: the ArchConfig plus the grl coefficient, as JSON text;
- ``__rng__``: the bit-generator state of the run RNG, as JSON text (optional);
- ``__meta__``: free-form run metadata (stage, epoch, config echo), as JSON text.

Arrays are stored unchanged, so save then load is bit-exact.
"""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from transfer.exceptions import DatasetFormatError, DimensionError
from transfer.services.networks import ArchConfig, ModelBundle, build_bundle

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return {"__ndarray__": value.tolist(), "dtype": str(value.dtype)}
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, np.integer):
        return int(value)
    return value


def _from_jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        if "__ndarray__" in value:
            return np.array(value["__ndarray__"], dtype=value["dtype"])
        return {k: _from_jsonable(v) for k, v in value.items()}
    return value


def rng_state_to_json(rng: np.random.Generator) -> str:
    return json.dumps(_jsonable(rng.bit_generator.state))


def rng_from_json(text: str) -> np.random.Generator:
    state = _from_jsonable(json.loads(text))
    bit_generator = getattr(np.random, state["bit_generator"])()
    bit_generator.state = state
    return np.random.Generator(bit_generator)


def bundle_arrays(bundle: ModelBundle) -> Dict[str, np.ndarray]:
    arrays: Dict[str, np.ndarray] = {}
    for stack_name, stack in bundle.stacks().items():
        for name, p in stack.named_parameters().items():
            arrays[f"{stack_name}.{name}"] = p.values
        for name, buf in stack.named_buffers().items():
            arrays[f"{stack_name}.{name}"] = buf
    return arrays


def save_checkpoint(
    path: PathLike,
    bundle: ModelBundle,
    rng: Optional[np.random.Generator] = None,
    meta: Optional[dict] = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload: Dict[str, np.ndarray] = dict(bundle_arrays(bundle))
    arch = {**bundle.arch.to_dict(), "grl_coefficient": bundle.grl_coefficient}
    payload["__arch__"] = np.array(json.dumps(arch))
    payload["__meta__"] = np.array(json.dumps(meta or {}, default=str))
    if rng is not None:
        payload["__rng__"] = np.array(rng_state_to_json(rng))
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    logger.info("checkpoint written: %s", path)
    return path


def load_checkpoint(path: PathLike) -> Tuple[ModelBundle, Optional[np.random.Generator], dict]:
    """Return (bundle, run rng or None, meta)."""
    path = Path(path)
    with np.load(path, allow_pickle=False) as archive:
        files = set(archive.files)
        if "__arch__" not in files:
            raise DatasetFormatError(f"{path} is not a model checkpoint (no __arch__ entry)")
        arch = json.loads(str(archive["__arch__"]))
        grl_coefficient = float(arch.pop("grl_coefficient", 1.0))
        bundle = build_bundle(ArchConfig.from_dict(arch), seed=0, grl_coefficient=grl_coefficient)

        for name, target in bundle_arrays(bundle).items():
            if name not in files:
                raise DatasetFormatError(f"checkpoint {path} has no array {name!r}")
            stored = archive[name]
            if stored.shape != target.shape:
                raise DimensionError(f"checkpoint array {name!r} has shape {stored.shape}, model expects {target.shape}")
            # in place: buffers are shared with the batch-norm layers
            target[...] = stored

        rng = rng_from_json(str(archive["__rng__"])) if "__rng__" in files else None
        meta = json.loads(str(archive["__meta__"])) if "__meta__" in files else {}
    return bundle, rng, meta
