"""Error hierarchy shared by the services and the management commands."""
from __future__ import annotations

from typing import Optional


class TransferError(Exception):
    """Root of every error raised by the transfer app."""


class DimensionError(TransferError, ValueError):
    """Shapes that do not compose (operands, layer geometry, checkpoint vs data)."""


class ConfigError(TransferError, ValueError):
    """An experiment or weighting parameter outside its documented range."""


class NonFiniteError(TransferError, ArithmeticError):
    """A forward op produced NaN or Inf."""

    def __init__(self, op: str):
        super().__init__(f"non-finite values produced by {op}")
        self.op = op


class DivergenceError(TransferError):
    """Training hit a non-finite loss; carries where it happened."""

    def __init__(self, stage: str, epoch: int, batch: int, detail: str = ""):
        msg = f"training diverged in {stage} stage at epoch {epoch}, batch {batch}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.stage = stage
        self.epoch = epoch
        self.batch = batch


class DatasetFormatError(TransferError, ValueError):
    """A malformed IDX or CSV file. `offset` is the byte offset of the problem."""

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DatasetError(TransferError, ValueError):
    """A task that cannot be built from the available samples."""


class EvaluationError(TransferError, ValueError):
    """Scoring inputs that admit no meaningful metric (e.g. one class only)."""
