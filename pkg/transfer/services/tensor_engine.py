"""
Reverse-mode automatic differentiation over NumPy arrays.

Every op builds its output eagerly and, when one of its inputs requires a
gradient, records a closure mapping the upstream gradient to one gradient per
input. `backward` replays the recorded ops in strict reverse creation order.

Only what the networks and losses of this project need is implemented: dense
and (transposed) 2-D convolutions, batch normalization, dropout, the two
activations, the sigmoid output, per-sample MSE, the gradient reversal op and
a handful of elementwise/reduction ops.
"""
from __future__ import annotations

import itertools
import zlib
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from transfer.exceptions import ConfigError, DimensionError, NonFiniteError

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_SEQUENCE = itertools.count()
_GRAD_ENABLED: ContextVar[bool] = ContextVar("grad_enabled", default=True)

DTYPES = {"float64": np.float64, "float32": np.float32}


def resolve_dtype(name: str) -> type:
    try:
        return DTYPES[str(name)]
    except KeyError:
        raise ConfigError(f"unsupported dtype {name!r}, expected one of {sorted(DTYPES)}") from None


@contextmanager
def no_grad() -> Iterator[None]:
    """Ops run inside this block record nothing (evaluation, weight computation)."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "op", "_parents", "_backward", "_seq")
    # numpy scalars/arrays on the left of an operator defer to Tensor
    __array_priority__ = 100

    def __init__(self, values: ArrayLike, requires_grad: bool = False, dtype=None):
        arr = np.array(values, dtype=dtype, copy=True)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.values: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._seq = next(_SEQUENCE)

    # ---------- introspection ----------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        if self.values.size != 1:
            raise DimensionError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # ---------- operators ----------

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.values.dtype))

    def __add__(self, other):
        return add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(self._lift(other)))

    def __rsub__(self, other):
        return add(self._lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, self._lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, self._lift(other))

    def __rtruediv__(self, other):
        return div(self._lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def log(self) -> "Tensor":
        return log(self)

    def clip(self, low: float, high: float) -> "Tensor":
        return clip(self, low, high)


def _result(values: np.ndarray, parents: Tuple[Tensor, ...], backward: BackwardFn, op: str) -> Tensor:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(op)
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.op = op
    out._seq = next(_SEQUENCE)
    track = _GRAD_ENABLED.get() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = parents if track else ()
    out._backward = backward if track else None
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------- elementwise / reductions ----------

def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _result(a.values + b.values, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return _result(-a.values, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.values, b.values

    def backward(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)
    return _result(av * bv, (a, b), backward, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.values, b.values

    def backward(g):
        return _unbroadcast(g / bv, a.shape), _unbroadcast(-g * av / (bv * bv), b.shape)
    return _result(av / bv, (a, b), backward, "div")


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return _result(np.sum(a.values, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.values.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return reduce_sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = a.shape
    return _result(a.values.reshape(shape), (a,), lambda g: (g.reshape(original),), "reshape")


def take(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.values.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] += g
        return (full,)
    return _result(a.values[index].copy(), (a,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))
    return _result(np.concatenate([t.values for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def split_rows(a: Tensor, n: int) -> Tuple[Tensor, Tensor]:
    """Inverse of `concat` along axis 0 for two parts: rows [0, n) and [n, N)."""
    if not 0 <= n <= a.shape[0]:
        raise DimensionError(f"cannot split {a.shape[0]} rows at {n}")
    return take(a, slice(0, n)), take(a, slice(n, None))


def log(a: Tensor) -> Tensor:
    av = a.values
    return _result(np.log(av), (a,), lambda g: (g / av,), "log")


def clip(a: Tensor, low: float, high: float) -> Tensor:
    inside = (a.values >= low) & (a.values <= high)
    return _result(np.clip(a.values, low, high), (a,), lambda g: (g * inside,), "clip")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    av, bv = a.values, b.values

    def backward(g):
        return g @ bv.T, av.T @ g
    return _result(av @ bv, (a, b), backward, "matmul")


# ---------- activations ----------

def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    # x == 0 takes the negative branch: gradient `slope`
    positive = x.values > 0
    scale = np.where(positive, 1.0, slope).astype(x.values.dtype)
    return _result(x.values * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.values)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def reverse_gradient(x: Tensor, coefficient: float) -> Tensor:
    """Identity forward; the backward pass multiplies the gradient by -coefficient."""
    if coefficient < 0:
        raise ConfigError(f"gradient reversal coefficient must be >= 0, got {coefficient}")
    c = float(coefficient)
    return _result(x.values.copy(), (x,), lambda g: (-c * g,), "grl")


# ---------- normalization / regularization ----------

def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta_bn: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization, channel axis 1. Train mode updates the running arrays in place."""
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta_bn.shape != (channels,):
        raise DimensionError(f"batch_norm affine parameters must have shape ({channels},)")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, channels) + (1,) * (x.ndim - 2)
    g_ = gamma.values.reshape(bshape)

    if training:
        if x.shape[0] < 2:
            raise DimensionError("batch_norm in train mode needs a batch of at least 2 samples")
        count = x.values.size // channels
        mean = x.values.mean(axis=axes)
        var = x.values.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * count / max(count - 1, 1)
    else:
        count = None
        mean, var = running_mean, running_var

    inv_std = 1.0 / np.sqrt(var.reshape(bshape) + eps)
    xhat = (x.values - mean.reshape(bshape)) * inv_std
    out = g_ * xhat + beta_bn.values.reshape(bshape)

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * g_
        if training:
            dx = (inv_std / count) * (
                count * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return _result(out, (x, gamma, beta_bn), backward, "batch_norm")


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in train mode needs the run generator")
    mask = (rng.random(x.shape) >= p).astype(x.values.dtype) / (1.0 - p)
    return _result(x.values * mask, (x,), lambda g: (g * mask,), "dropout")


# ---------- losses ----------

def mse_per_sample(recon: Tensor, target: Tensor) -> Tensor:
    """Mean over features of (recon - target)^2, one value per sample."""
    if recon.shape != target.shape:
        raise DimensionError(f"reconstruction {recon.shape} and input {target.shape} differ")
    n = recon.shape[0]
    diff = recon.values - target.values
    features = diff[0].size if n else 1
    out = (diff * diff).reshape(n, -1).mean(axis=1)

    def backward(g):
        d = (2.0 / features) * diff * g.reshape((n,) + (1,) * (diff.ndim - 1))
        return d, -d
    return _result(out, (recon, target), backward, "mse_per_sample")


# ---------- convolutions ----------

def conv_extent(extent: int, k: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - k) // stride + 1


def deconv_extent(extent: int, k: int, stride: int, padding: int, output_padding: int = 0) -> int:
    return (extent - 1) * stride - 2 * padding + k + output_padding


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride][:, :, :ho, :wo]


def _correlate(xp: np.ndarray, kernel: np.ndarray, stride: int, ho: int, wo: int) -> np.ndarray:
    # (N,C,Hp,Wp) * (O,C,k,k) -> (N,O,ho,wo)
    win = _windows(xp, kernel.shape[2], stride, ho, wo)
    return np.einsum("nchwij,ocij->nohw", win, kernel, optimize=True)


def _scatter(g: np.ndarray, kernel: np.ndarray, stride: int, hp: int, wp: int) -> np.ndarray:
    # adjoint of _correlate w.r.t. its input: (N,O,ho,wo) -> (N,C,hp,wp)
    n, _, ho, wo = g.shape
    channels, k = kernel.shape[1], kernel.shape[2]
    out = np.zeros((n, channels, hp, wp), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += np.einsum(
                "nohw,oc->nchw", g, kernel[:, :, i, j], optimize=True
            )
    return out


def _check_geometry(x: Tensor, kernel: Tensor, stride: int, padding: int, op: str) -> int:
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"{op} expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    k = kernel.shape[2]
    if kernel.shape[3] != k or k < 1:
        raise DimensionError(f"{op} supports square kernels only, got {kernel.shape[2:]}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"{op} needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    return k


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0, bias: Optional[Tensor] = None) -> Tensor:
    """Cross-correlation, input N x C x H x W, kernel Cout x C x k x k."""
    k = _check_geometry(x, kernel, stride, padding, "conv2d")
    n, c, h, w = x.shape
    if kernel.shape[1] != c:
        raise DimensionError(f"conv2d kernel expects {kernel.shape[1]} input channels, input has {c}")
    ho, wo = conv_extent(h, k, stride, padding), conv_extent(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d output extent {ho}x{wo} for input {h}x{w}, k={k}, stride={stride}")

    xp = np.pad(x.values, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    kv = kernel.values
    out = _correlate(xp, kv, stride, ho, wo)
    parents: Tuple[Tensor, ...] = (x, kernel)
    if bias is not None:
        out = out + bias.values.reshape(1, -1, 1, 1)
        parents = parents + (bias,)

    def backward(g):
        dk = np.einsum("nohw,nchwij->ocij", g, _windows(xp, k, stride, ho, wo), optimize=True)
        dxp = _scatter(g, kv, stride, xp.shape[2], xp.shape[3])
        dx = dxp[:, :, padding:padding + h, padding:padding + w]
        grads = [dx, dk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _result(out, parents, backward, "conv2d")


def deconv2d(
    y: Tensor,
    kernel: Tensor,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
    bias: Optional[Tensor] = None,
) -> Tensor:
    """Transposed convolution, input N x Cin x H x W, kernel Cin x Cout x k x k.

    The forward map is the input-gradient map of conv2d with the same kernel and geometry.
    """
    k = _check_geometry(y, kernel, stride, padding, "deconv2d")
    n, c, h, w = y.shape
    if kernel.shape[0] != c:
        raise DimensionError(f"deconv2d kernel expects {kernel.shape[0]} input channels, input has {c}")
    if not 0 <= output_padding < stride:
        raise DimensionError(f"deconv2d output_padding must be smaller than stride, got {output_padding}")
    ho = deconv_extent(h, k, stride, padding, output_padding)
    wo = deconv_extent(w, k, stride, padding, output_padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"deconv2d output extent {ho}x{wo} for input {h}x{w}")

    kv = kernel.values
    hp, wp = ho + 2 * padding, wo + 2 * padding
    full = _scatter(y.values, kv, stride, hp, wp)
    out = full[:, :, padding:padding + ho, padding:padding + wo]
    parents: Tuple[Tensor, ...] = (y, kernel)
    if bias is not None:
        out = out + bias.values.reshape(1, -1, 1, 1)
        parents = parents + (bias,)
    else:
        out = out.copy()

    def backward(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        dy = _correlate(gp, kv, stride, h, w)
        dk = np.einsum("nohw,nchwij->ocij", y.values, _windows(gp, k, stride, h, w), optimize=True)
        grads = [dy, dk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _result(out, parents, backward, "deconv2d")


# ---------- tape / backward ----------

@dataclass
class Tape:
    """Recorded ops reachable from a loss, newest first."""

    ops: List[Tensor]

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        seen = set()
        stack = [loss]
        nodes: List[Tensor] = []
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node.requires_grad:
                nodes.append(node)
                stack.extend(node._parents)
        nodes.sort(key=lambda t: t._seq, reverse=True)
        return cls(nodes)


def backward(loss: Tensor) -> None:
    """Accumulate dloss/dtheta into `.grad` of every leaf tensor that requires a gradient."""
    if loss.values.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss was not recorded: no input requires a gradient (or it was built under no_grad)")

    pending = {id(loss): np.ones_like(loss.values)}
    for node in Tape.from_loss(loss).ops:
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


# ---------- optimizer ----------

@dataclass
class AdamState:
    """Moments of one parameter group."""

    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], lr: float = 0.01, **kwargs) -> "AdamState":
        return cls(
            lr=lr,
            m=[np.zeros_like(p.values) for p in params],
            v=[np.zeros_like(p.values) for p in params],
            **kwargs,
        )


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update; a missing gradient counts as zero."""
    if len(params) != len(state.m):
        raise DimensionError(f"Adam state tracks {len(state.m)} parameters, got {len(params)}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for p, m, v in zip(params, state.m, state.v):
        if m.shape != p.shape:
            raise DimensionError(f"Adam moment shape {m.shape} does not match parameter {p.shape}")
        g = p.grad if p.grad is not None else np.zeros_like(p.values)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.values -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------- randomness ----------

def make_rng(seed: int, *keys: Union[int, str]) -> np.random.Generator:
    """Counter-based generator keyed by (seed, *keys); string keys are hashed with crc32."""
    words = [int(seed)] + [zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))
