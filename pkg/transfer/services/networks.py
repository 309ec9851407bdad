"""
Encoder F, decoder D and domain classifier C, plus the gradient reversal
layer that connects F to C.

Two architectures are supported:

- ``conv``: the digit stack Conv2(3,2,32)-Conv2(3,2,16)-Conv2(3,3,8), mirrored by
  Dconv2(3,3,16)-Dconv2(3,2,32)-Dconv2(3,2,C), BN + leaky ReLU after every layer
  but the last. Padding is 1 everywhere, which maps 28x28 to 8x3x3 = 72 features.
- ``mlp``: Dense(D,16)-leakyReLU-Dense(16,8) and its mirror, for low-dimensional
  synthetic tasks.

The domain classifier is Linear(w,128)-Linear(128,128)-Linear(128,1) with ReLU
and dropout after the first two layers and a sigmoid output.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from transfer.exceptions import ConfigError, DimensionError
from transfer.services import tensor_engine as te
from transfer.services.tensor_engine import Tensor

logger = logging.getLogger(__name__)

ARCHITECTURES = ("mlp", "conv")
LAYER_KINDS = ("dense", "conv", "deconv", "batch_norm", "leaky_relu", "relu", "sigmoid_out", "dropout", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    k: int = 0
    s: int = 1
    c: int = 0
    padding: int = 0
    output_padding: int = 0
    slope: float = 0.2
    p: float = 0.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")


# ---------- layers ----------

class Layer:
    def __init__(self):
        self.params: Dict[str, Tensor] = {}
        self.buffers: Dict[str, np.ndarray] = {}

    def forward(self, x: Tensor, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
        raise NotImplementedError


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


class Dense(Layer):
    def __init__(self, width_in: int, width_out: int, rng, dtype):
        super().__init__()
        self.params = {"weight": _uniform(rng, (width_in, width_out), width_in, dtype),
                       "bias": _zeros((width_out,), dtype)}

    def forward(self, x, training, rng):
        return x @ self.params["weight"] + self.params["bias"]


class Conv(Layer):
    def __init__(self, channels_in: int, spec: LayerSpec, rng, dtype):
        super().__init__()
        self.spec = spec
        fan_in = channels_in * spec.k * spec.k
        self.params = {"weight": _uniform(rng, (spec.c, channels_in, spec.k, spec.k), fan_in, dtype),
                       "bias": _zeros((spec.c,), dtype)}

    def forward(self, x, training, rng):
        return te.conv2d(x, self.params["weight"], self.spec.s, self.spec.padding, bias=self.params["bias"])


class Deconv(Layer):
    def __init__(self, channels_in: int, spec: LayerSpec, rng, dtype):
        super().__init__()
        self.spec = spec
        fan_in = spec.c * spec.k * spec.k
        self.params = {"weight": _uniform(rng, (channels_in, spec.c, spec.k, spec.k), fan_in, dtype),
                       "bias": _zeros((spec.c,), dtype)}

    def forward(self, x, training, rng):
        s = self.spec
        return te.deconv2d(x, self.params["weight"], s.s, s.padding, s.output_padding, bias=self.params["bias"])


class BatchNorm(Layer):
    def __init__(self, channels: int, dtype):
        super().__init__()
        self.params = {"gamma": Tensor(np.ones(channels), requires_grad=True, dtype=dtype),
                       "beta": _zeros((channels,), dtype)}
        self.buffers = {"running_mean": np.zeros(channels, dtype=dtype),
                        "running_var": np.ones(channels, dtype=dtype)}

    def forward(self, x, training, rng):
        return te.batch_norm(x, self.params["gamma"], self.params["beta"],
                             self.buffers["running_mean"], self.buffers["running_var"], training)


class LeakyReLU(Layer):
    def __init__(self, slope: float):
        super().__init__()
        self.slope = slope

    def forward(self, x, training, rng):
        return te.leaky_relu(x, self.slope)


class ReLU(Layer):
    def forward(self, x, training, rng):
        return te.relu(x)


class SigmoidOut(Layer):
    def forward(self, x, training, rng):
        return te.sigmoid(x)


class Dropout(Layer):
    def __init__(self, p: float):
        super().__init__()
        self.p = p

    def forward(self, x, training, rng):
        return te.dropout(x, self.p, training, rng)


class Flatten(Layer):
    def forward(self, x, training, rng):
        return x.reshape(x.shape[0], -1)


class LayerStack:
    """Layers applied in order; per-sample shapes are checked at build time."""

    def __init__(self, specs: Sequence[LayerSpec], input_shape: Tuple[int, ...], rng, dtype):
        self.specs = list(specs)
        self.input_shape = tuple(input_shape)
        self.layers: List[Layer] = []
        shape = self.input_shape
        for spec in self.specs:
            layer, shape = _make_layer(spec, shape, rng, dtype)
            self.layers.append(layer)
        self.output_shape = shape

    def forward(self, x: Tensor, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
        for layer in self.layers:
            x = layer.forward(x, training, rng)
        return x

    def named_parameters(self) -> Dict[str, Tensor]:
        return {f"{i}.{name}": p for i, layer in enumerate(self.layers) for name, p in layer.params.items()}

    def named_buffers(self) -> Dict[str, np.ndarray]:
        return {f"{i}.{name}": b for i, layer in enumerate(self.layers) for name, b in layer.buffers.items()}

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def count_parameters(self) -> int:
        return int(sum(p.values.size for p in self.parameters()))


def _make_layer(spec: LayerSpec, shape: Tuple[int, ...], rng, dtype):
    kind = spec.kind
    if kind == "dense":
        if len(shape) != 1:
            raise DimensionError(f"dense layer needs flat input, got per-sample shape {shape}")
        return Dense(shape[0], spec.c, rng, dtype), (spec.c,)
    if kind in ("conv", "deconv"):
        if len(shape) != 3:
            raise DimensionError(f"{kind} layer needs C x H x W input, got per-sample shape {shape}")
        channels, h, w = shape
        if kind == "conv":
            ho = te.conv_extent(h, spec.k, spec.s, spec.padding)
            wo = te.conv_extent(w, spec.k, spec.s, spec.padding)
            layer = Conv(channels, spec, rng, dtype)
        else:
            if not 0 <= spec.output_padding < max(spec.s, 1):
                raise DimensionError(f"output_padding {spec.output_padding} must be below stride {spec.s}")
            ho = te.deconv_extent(h, spec.k, spec.s, spec.padding, spec.output_padding)
            wo = te.deconv_extent(w, spec.k, spec.s, spec.padding, spec.output_padding)
            layer = Deconv(channels, spec, rng, dtype)
        if ho < 1 or wo < 1:
            raise DimensionError(f"{kind}(k={spec.k}, s={spec.s}) maps {h}x{w} to a non-positive extent")
        return layer, (spec.c, ho, wo)
    if kind == "batch_norm":
        return BatchNorm(shape[0], dtype), shape
    if kind == "leaky_relu":
        return LeakyReLU(spec.slope), shape
    if kind == "relu":
        return ReLU(), shape
    if kind == "sigmoid_out":
        return SigmoidOut(), shape
    if kind == "dropout":
        return Dropout(spec.p), shape
    return Flatten(), (int(np.prod(shape)),)


# ---------- architectures ----------

# (k, s, channels) of the digit encoder; padding 1 on every layer
CONV_ENCODER = ((3, 2, 32), (3, 2, 16), (3, 3, 8))
MLP_WIDTHS = (16, 8)
CLASSIFIER_WIDTHS = (128, 128)


def _check_arch(arch: str) -> None:
    if arch not in ARCHITECTURES:
        raise ConfigError(f"unknown architecture {arch!r}, expected one of {ARCHITECTURES}")


def encoder_extents(input_shape: Tuple[int, ...]) -> List[int]:
    """Spatial extents along the conv encoder, input first (28 -> 14 -> 7 -> 3)."""
    extents = [input_shape[1]]
    for k, s, _ in CONV_ENCODER:
        extents.append(te.conv_extent(extents[-1], k, s, 1))
    return extents


def encoder_specs(arch: str, input_shape: Tuple[int, ...], slope: float = 0.2) -> List[LayerSpec]:
    _check_arch(arch)
    if arch == "mlp":
        width, code = MLP_WIDTHS
        return [LayerSpec("dense", c=width), LayerSpec("leaky_relu", slope=slope), LayerSpec("dense", c=code)]
    specs: List[LayerSpec] = []
    for i, (k, s, c) in enumerate(CONV_ENCODER):
        specs.append(LayerSpec("conv", k=k, s=s, c=c, padding=1))
        if i < len(CONV_ENCODER) - 1:
            specs += [LayerSpec("batch_norm"), LayerSpec("leaky_relu", slope=slope)]
    return specs


def decoder_specs(
    arch: str,
    output_shape: Tuple[int, ...],
    slope: float = 0.2,
    sigmoid_output: bool = False,
) -> List[LayerSpec]:
    _check_arch(arch)
    if arch == "mlp":
        specs = [LayerSpec("dense", c=MLP_WIDTHS[0]), LayerSpec("leaky_relu", slope=slope),
                 LayerSpec("dense", c=output_shape[0])]
    else:
        extents = encoder_extents(output_shape)
        # mirror the encoder: Dconv2(3,3,16)-Dconv2(3,2,32)-Dconv2(3,2,C)
        mirrored = list(reversed(CONV_ENCODER))
        channels = [c for _, _, c in reversed(CONV_ENCODER[:-1])] + [output_shape[0]]
        specs = []
        for i, ((k, s, _), c) in enumerate(zip(mirrored, channels)):
            h_in, h_out = extents[-1 - i], extents[-2 - i]
            extra = h_out - te.deconv_extent(h_in, k, s, 1, 0)
            if not 0 <= extra < s:
                raise DimensionError(
                    f"Dconv2({k},{s},{c}) cannot map extent {h_in} back to {h_out} (output_padding {extra})"
                )
            specs.append(LayerSpec("deconv", k=k, s=s, c=c, padding=1, output_padding=extra))
            if i < len(mirrored) - 1:
                specs += [LayerSpec("batch_norm"), LayerSpec("leaky_relu", slope=slope)]
    if sigmoid_output:
        specs.append(LayerSpec("sigmoid_out"))
    return specs


def classifier_specs(dropout: float = 0.5) -> List[LayerSpec]:
    specs: List[LayerSpec] = []
    for width in CLASSIFIER_WIDTHS:
        specs += [LayerSpec("dense", c=width), LayerSpec("relu"), LayerSpec("dropout", p=dropout)]
    return specs + [LayerSpec("dense", c=1), LayerSpec("sigmoid_out")]


def _validate_input_shape(arch: str, input_shape: Tuple[int, ...]) -> None:
    if arch == "mlp" and len(input_shape) != 1:
        raise DimensionError(f"mlp architecture needs flat samples, got shape {input_shape}")
    if arch == "conv":
        if len(input_shape) != 3:
            raise DimensionError(f"conv architecture needs C x H x W samples, got shape {input_shape}")
        if input_shape[1] != input_shape[2]:
            raise DimensionError(f"conv architecture needs square images, got {input_shape[1]}x{input_shape[2]}")


def build_encoder(arch: str, input_shape: Tuple[int, ...], rng, slope: float = 0.2, dtype=np.float64) -> LayerStack:
    _check_arch(arch)
    _validate_input_shape(arch, tuple(input_shape))
    return LayerStack(encoder_specs(arch, input_shape, slope), input_shape, rng, dtype)


def build_decoder(
    arch: str,
    feature_shape: Tuple[int, ...],
    output_shape: Tuple[int, ...],
    rng,
    slope: float = 0.2,
    sigmoid_output: bool = False,
    dtype=np.float64,
) -> LayerStack:
    stack = LayerStack(decoder_specs(arch, output_shape, slope, sigmoid_output), feature_shape, rng, dtype)
    if stack.output_shape != tuple(output_shape):
        raise DimensionError(f"decoder produces {stack.output_shape}, expected {tuple(output_shape)}")
    return stack


def build_domain_classifier(feature_width: int, rng, dropout: float = 0.5, dtype=np.float64) -> LayerStack:
    return LayerStack(classifier_specs(dropout), (feature_width,), rng, dtype)


# ---------- bundle ----------

@dataclass(frozen=True)
class ArchConfig:
    arch: str
    input_shape: Tuple[int, ...]
    leaky_slope: float = 0.2
    dropout: float = 0.5
    decoder_sigmoid: Optional[bool] = None
    dtype: str = "float64"

    def __post_init__(self):
        _check_arch(self.arch)
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.decoder_sigmoid is None:
            # bounded pixels for images, unbounded coordinates for synthetic data
            object.__setattr__(self, "decoder_sigmoid", self.arch == "conv")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["input_shape"] = list(self.input_shape)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ArchConfig":
        return cls(**{**data, "input_shape": tuple(data["input_shape"])})


@dataclass
class ModelBundle:
    arch: ArchConfig
    encoder: LayerStack
    decoder: LayerStack
    classifier: LayerStack
    grl_coefficient: float = 1.0
    extra: dict = field(default_factory=dict)

    @property
    def feature_shape(self) -> Tuple[int, ...]:
        return self.encoder.output_shape

    @property
    def feature_width(self) -> int:
        return int(np.prod(self.feature_shape))

    def autoencoder_parameters(self) -> List[Tensor]:
        return self.encoder.parameters() + self.decoder.parameters()

    def classifier_parameters(self) -> List[Tensor]:
        return self.classifier.parameters()

    def stacks(self) -> Dict[str, LayerStack]:
        return {"encoder": self.encoder, "decoder": self.decoder, "classifier": self.classifier}


def build_bundle(arch_cfg: ArchConfig, seed: int, grl_coefficient: float = 1.0) -> ModelBundle:
    if grl_coefficient < 0:
        raise ConfigError(f"grl coefficient must be >= 0, got {grl_coefficient}")
    dtype = te.resolve_dtype(arch_cfg.dtype)
    rng = te.make_rng(seed, "init")
    encoder = build_encoder(arch_cfg.arch, arch_cfg.input_shape, rng, arch_cfg.leaky_slope, dtype)
    decoder = build_decoder(arch_cfg.arch, encoder.output_shape, arch_cfg.input_shape, rng,
                            arch_cfg.leaky_slope, bool(arch_cfg.decoder_sigmoid), dtype)
    classifier = build_domain_classifier(int(np.prod(encoder.output_shape)), rng, arch_cfg.dropout, dtype)
    logger.debug(
        "built %s bundle: F=%d D=%d C=%d parameters",
        arch_cfg.arch, encoder.count_parameters(), decoder.count_parameters(), classifier.count_parameters(),
    )
    return ModelBundle(arch_cfg, encoder, decoder, classifier, float(grl_coefficient))


# ---------- forward passes ----------

def as_input(bundle: ModelBundle, x) -> Tensor:
    if isinstance(x, Tensor):
        t = x
    else:
        t = Tensor(x, dtype=te.resolve_dtype(bundle.arch.dtype))
    if t.shape[1:] != bundle.arch.input_shape:
        raise DimensionError(f"model expects samples of shape {bundle.arch.input_shape}, got {t.shape[1:]}")
    return t


def grl(features: Tensor, coefficient: float) -> Tensor:
    return te.reverse_gradient(features, coefficient)


def forward_autoencode(
    bundle: ModelBundle, x, training: bool = False, rng: Optional[np.random.Generator] = None
) -> Tuple[Tensor, Tensor]:
    """D(F(x)): returns (features, reconstruction)."""
    x = as_input(bundle, x)
    features = bundle.encoder.forward(x, training, rng)
    return features, bundle.decoder.forward(features, training, rng)


def forward_domain(
    bundle: ModelBundle, features: Tensor, training: bool = False, rng: Optional[np.random.Generator] = None
) -> Tensor:
    """C(GRL(F(x))): probability that each sample is a target sample (source = 0, target = 1)."""
    flat = features.reshape(features.shape[0], -1)
    return bundle.classifier.forward(grl(flat, bundle.grl_coefficient), training, rng).reshape(-1)


# ---------- batched inference ----------

def _batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield slice(start, min(start + batch_size, n))


def reconstruction_losses(bundle: ModelBundle, samples: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Per-sample MSE of D(F(x)) in eval mode; no graph is recorded."""
    out = np.empty(samples.shape[0], dtype=np.float64)
    with te.no_grad():
        for sl in _batches(samples.shape[0], batch_size):
            x = as_input(bundle, samples[sl])
            _, recon = forward_autoencode(bundle, x, training=False)
            out[sl] = te.mse_per_sample(recon, x).values
    return out


def encode(bundle: ModelBundle, samples: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Flattened eval-mode features F(x)."""
    out = np.empty((samples.shape[0], bundle.feature_width), dtype=np.float64)
    with te.no_grad():
        for sl in _batches(samples.shape[0], batch_size):
            features = bundle.encoder.forward(as_input(bundle, samples[sl]), training=False)
            out[sl] = features.values.reshape(features.shape[0], -1)
    return out


def domain_probabilities(bundle: ModelBundle, samples: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Eval-mode C(F(x)), the probability of belonging to the target domain."""
    out = np.empty(samples.shape[0], dtype=np.float64)
    with te.no_grad():
        for sl in _batches(samples.shape[0], batch_size):
            features = bundle.encoder.forward(as_input(bundle, samples[sl]), training=False)
            out[sl] = forward_domain(bundle, features, training=False).values
    return out
