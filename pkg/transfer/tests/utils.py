"""Helpers shared by the test modules."""
from typing import Callable, List, Sequence

import numpy as np

from transfer.services import tensor_engine as te
from transfer.services.tensor_engine import Tensor


def scalarize(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    """A fixed random projection turning any output into a scalar loss."""
    weights = Tensor(rng.normal(size=out.shape))
    return lambda t: (t * weights).sum()


def numeric_gradients(fn: Callable[..., float], arrays: Sequence[np.ndarray], eps: float = 1e-6) -> List[np.ndarray]:
    """Central differences of the scalar fn(*arrays) with respect to every entry of every array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + eps
            plus = fn(*arrays)
            a[idx] = orig - eps
            minus = fn(*arrays)
            a[idx] = orig
            g[idx] = (plus - minus) / (2 * eps)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def gradient_errors(op: Callable[..., Tensor], arrays: Sequence[np.ndarray], seed: int = 0) -> List[float]:
    """
    Relative error between backward() and central differences for every input
    of `op`, through a random projection of its output.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    rng = np.random.default_rng(seed)
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = op(*leaves)
    project = scalarize(out, rng)
    te.backward(project(out))
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.values) for leaf in leaves]

    def value(*raw):
        with te.no_grad():
            return project(op(*[Tensor(r) for r in raw])).item()

    numeric = numeric_gradients(value, arrays)
    return [relative_error(a, n) for a, n in zip(analytic, numeric)]
