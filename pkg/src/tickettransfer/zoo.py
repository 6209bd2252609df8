"""Architectures, presets, parameter initialisation and forward/backward passes."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence

import numpy as np

from . import layers as L
from .errors import ArchitectureError, ConfigError, ContractError, NumericError
from .layers import Ctx, ParamSpec
from .numeric import make_rng

LAYER_KINDS = ("dense", "conv2d", "maxpool", "avgpool", "relu", "batchnorm",
               "residual-block", "flatten", "softmax-xent")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    dims: dict = field(default_factory=dict, hash=False, compare=True)
    prunable: bool = False


def dense(name, fin, fout, prunable=False):
    return LayerSpec("dense", name, {"in": fin, "out": fout}, prunable)


def conv(name, cin, cout, k=3, stride=1, prunable=True):
    return LayerSpec("conv2d", name, {"in": cin, "out": cout, "k": k, "stride": stride}, prunable)


def block(name, cin, cout, stride=1):
    return LayerSpec("residual-block", name, {"in": cin, "out": cout, "stride": stride}, True)


def bn(name, channels):
    return LayerSpec("batchnorm", name, {"channels": channels})


def relu(name):
    return LayerSpec("relu", name)


@dataclass
class Architecture:
    name: str
    layers: list
    head: list
    input_shape: tuple
    num_classes: int

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.validate()

    @cached_property
    def modules(self) -> list:
        return [_build(spec, head=False) for spec in self.layers] + \
               [_build(spec, head=True) for spec in self.head]

    @cached_property
    def specs(self) -> dict[str, ParamSpec]:
        out = {}
        for layer in self.modules:
            for s in layer.param_specs():
                if s.name in out:
                    raise ArchitectureError(f"duplicate tensor name {s.name}")
                out[s.name] = s
        return out

    @property
    def feature_dim(self) -> int:
        """Input width of the head."""
        return self._shapes()[len(self.layers)][-1]

    def validate(self):
        if self.num_classes < 1:
            raise ArchitectureError("num_classes must be positive")
        if not self.head:
            raise ArchitectureError(f"{self.name}: architecture needs a head")
        for spec in self.layers + self.head:
            if spec.kind not in LAYER_KINDS or spec.kind == "softmax-xent":
                raise ArchitectureError(f"{spec.name}: unsupported layer kind {spec.kind!r}")
            if spec.prunable and spec.kind not in ("dense", "conv2d", "residual-block"):
                raise ArchitectureError(f"{spec.name}: only dense/conv layers can be prunable")
        shapes = self._shapes()
        if shapes[-1] != (self.num_classes,):
            raise ArchitectureError(
                f"{self.name}: head emits {shapes[-1]}, expected ({self.num_classes},)")
        _ = self.specs

    def _shapes(self) -> list[tuple]:
        """Per-sample activation shapes; entry i is the input of layer i."""
        shape = self.input_shape
        out = [shape]
        for spec in self.layers + self.head:
            d = spec.dims
            k = spec.kind
            if k in ("conv2d", "residual-block"):
                if len(shape) != 3 or shape[0] != d["in"]:
                    raise ArchitectureError(f"{spec.name}: expects {d['in']} channels, got {shape}")
                kk = d.get("k", 3)
                s = d.get("stride", 1)
                pad = kk // 2
                h = (shape[1] + 2 * pad - kk) // s + 1
                w = (shape[2] + 2 * pad - kk) // s + 1
                if h < 1 or w < 1:
                    raise ArchitectureError(f"{spec.name}: spatial extent collapsed")
                shape = (d["out"], h, w)
            elif k == "batchnorm":
                if shape[0] != d["channels"]:
                    raise ArchitectureError(f"{spec.name}: channel mismatch {shape} vs {d}")
            elif k == "maxpool":
                p = d.get("k", 2)
                if len(shape) != 3 or shape[1] % p or shape[2] % p:
                    raise ArchitectureError(f"{spec.name}: cannot pool {shape} by {p}")
                shape = (shape[0], shape[1] // p, shape[2] // p)
            elif k == "avgpool":
                if len(shape) != 3:
                    raise ArchitectureError(f"{spec.name}: avgpool needs spatial input")
                shape = (shape[0],)
            elif k == "flatten":
                shape = (int(np.prod(shape)),)
            elif k == "dense":
                if shape != (d["in"],):
                    raise ArchitectureError(f"{spec.name}: expects ({d['in']},), got {shape}")
                shape = (d["out"],)
            out.append(shape)
        return out

    def output_shapes(self) -> list[tuple]:
        return self._shapes()[1:]

    def param_count(self, trainable_only=True) -> int:
        return sum(s.size for s in self.specs.values() if s.trainable or not trainable_only)

    def conv_param_count(self) -> int:
        return sum(s.size for s in self.specs.values() if s.layer_kind == "conv2d")

    def prunable_names(self) -> list[str]:
        return [n for n, s in self.specs.items() if s.prunable]

    def head_names(self) -> list[str]:
        return [n for n, s in self.specs.items() if s.head]


def _build(spec: LayerSpec, head: bool):
    d = spec.dims
    k = spec.kind
    if k == "dense":
        return L.Dense(spec.name, d["in"], d["out"], d.get("bias", True), spec.prunable, head)
    if k == "conv2d":
        return L.Conv2D(spec.name, d["in"], d["out"], d.get("k", 3), d.get("stride", 1),
                        bias=d.get("bias", False), prunable=spec.prunable, head=head)
    if k == "residual-block":
        return L.ResidualBlock(spec.name, d["in"], d["out"], d.get("stride", 1), spec.prunable)
    if k == "batchnorm":
        return L.BatchNorm(spec.name, d["channels"], head)
    if k == "relu":
        return L.ReLU(spec.name)
    if k == "maxpool":
        return L.MaxPool(spec.name, d.get("k", 2))
    if k == "avgpool":
        return L.GlobalAvgPool(spec.name)
    if k == "flatten":
        return L.Flatten(spec.name)
    raise ArchitectureError(f"unsupported layer kind {k!r}")


# --------------------------------------------------------------------------- presets

def micro_resnet(input_shape=(3, 16, 16), num_classes=10) -> Architecture:
    """16, 3x[16,16], 3x[32,32], 3x[64,64], global avg-pool, linear head."""
    c = input_shape[0]
    layers = [conv("conv0", c, 16), bn("bn0", 16), relu("relu0")]
    cin = 16
    for stage, width in enumerate((16, 32, 64), start=1):
        for i in range(3):
            stride = 2 if (i == 0 and stage > 1) else 1
            layers.append(block(f"s{stage}b{i}", cin, width, stride))
            cin = width
    layers.append(LayerSpec("avgpool", "pool"))
    return Architecture("micro-resnet", layers, [dense("head.fc", 64, num_classes)],
                        input_shape, num_classes)


def micro_vgg(input_shape=(3, 16, 16), num_classes=10) -> Architecture:
    """Six 3x3 conv/batchnorm/relu layers in pairs of 16, 32, 64 with 2x2 max-pooling."""
    c = input_shape[0]
    layers = []
    cin = c
    i = 0
    for stage, width in enumerate((16, 32, 64)):
        for _ in range(2):
            layers += [conv(f"conv{i}", cin, width), bn(f"bn{i}", width), relu(f"relu{i}")]
            cin = width
            i += 1
        if stage < 2:
            layers.append(LayerSpec("maxpool", f"pool{stage}", {"k": 2}))
    layers.append(LayerSpec("avgpool", "gap"))
    return Architecture("micro-vgg", layers, [dense("head.fc", 64, num_classes)],
                        input_shape, num_classes)


def fc_net(name, hidden: Sequence[int], input_shape=(1, 28, 28), num_classes=10,
           prunable=True) -> Architecture:
    fin = int(np.prod(input_shape))
    layers = [LayerSpec("flatten", "flatten")]
    for i, h in enumerate(hidden):
        layers += [dense(f"fc{i}", fin, h, prunable), relu(f"relu{i}")]
        fin = h
    return Architecture(name, layers, [dense("head.fc", fin, num_classes, prunable)],
                        input_shape, num_classes)


def logistic(input_shape, num_classes) -> Architecture:
    return fc_net("logistic", [], input_shape, num_classes)


def fc2(input_shape, num_classes, hidden=96) -> Architecture:
    return fc_net("fc2", [hidden], input_shape, num_classes)


PRESETS = {
    "micro-resnet": micro_resnet,
    "micro-vgg": micro_vgg,
    "fc-small": lambda input_shape=(1, 28, 28), num_classes=10:
        fc_net("fc-small", [1024], input_shape, num_classes),
    "fc-large": lambda input_shape=(1, 28, 28), num_classes=10:
        fc_net("fc-large", [1024, 100], input_shape, num_classes),
}


def preset(name: str, input_shape=None, num_classes=10) -> Architecture:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise ArchitectureError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    if input_shape is None:
        return factory(num_classes=num_classes)
    return factory(input_shape=tuple(input_shape), num_classes=num_classes)


# --------------------------------------------------------------------------- parameters

class ParameterSet(dict):
    """Ordered mapping of tensor name to array, annotated with :class:`ParamSpec`."""

    def __init__(self, tensors=(), specs=None):
        super().__init__(tensors)
        self.specs: dict[str, ParamSpec] = dict(specs or {})

    def copy(self) -> "ParameterSet":
        return ParameterSet({k: v.copy() for k, v in self.items()}, self.specs)

    def astype(self, dtype) -> "ParameterSet":
        return ParameterSet({k: v.astype(dtype) for k, v in self.items()}, self.specs)

    @property
    def dtype(self):
        return next(iter(self.values())).dtype

    def trainable_names(self) -> list[str]:
        return [k for k in self if self.specs[k].trainable]

    def prunable_names(self) -> list[str]:
        return [k for k in self if self.specs[k].prunable]

    def bytes_equal(self, other, names=None) -> bool:
        names = list(self) if names is None else list(names)
        if names != [n for n in names if n in other]:
            return False
        return all(self[n].dtype == other[n].dtype and self[n].shape == other[n].shape
                   and self[n].tobytes() == other[n].tobytes() for n in names)


@dataclass(frozen=True)
class InitDist:
    """Parameter distribution for weights; biases and batchnorm use fixed values.

    ``fan-in-scaled-uniform`` draws U(-b, b) with ``b = gain * sqrt(6 / fan_in)``;
    ``fan-in-scaled-normal`` draws N(0, gain^2 * 2 / fan_in); ``zeros`` sets
    every weight to 0.  ``residual_scale`` is the starting scale of the
    batchnorm that closes each residual branch (0 starts every block as the
    identity).
    """

    kind: str = "fan-in-scaled-uniform"
    gain: float = 1.0
    residual_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("fan-in-scaled-uniform", "fan-in-scaled-normal", "zeros"):
            raise ConfigError(f"unknown init kind {self.kind!r}")

    def sample(self, spec: ParamSpec, seed: int, dtype) -> np.ndarray:
        if self.kind == "zeros":
            return np.zeros(spec.shape, dtype=dtype)
        rng = make_rng(seed, "init", spec.name)
        if self.kind == "fan-in-scaled-uniform":
            bound = self.gain * math.sqrt(6.0 / spec.fan_in)
            return rng.uniform(-bound, bound, size=spec.shape).astype(dtype)
        if self.kind == "fan-in-scaled-normal":
            std = self.gain * math.sqrt(2.0 / spec.fan_in)
            return (rng.standard_normal(spec.shape) * std).astype(dtype)
        raise ArchitectureError(f"unknown init distribution {self.kind!r}")


def _init_tensor(spec: ParamSpec, dist: InitDist, seed: int, dtype) -> np.ndarray:
    if spec.role == "weight":
        return dist.sample(spec, seed, dtype)
    if spec.role == "scale" and spec.name.endswith(".bn2.scale"):
        return np.full(spec.shape, dist.residual_scale, dtype=dtype)
    if spec.role in ("scale", "running_var"):
        return np.ones(spec.shape, dtype=dtype)
    return np.zeros(spec.shape, dtype=dtype)


def init_params(arch: Architecture, dist: InitDist = InitDist(), seed: int = 0,
                dtype=np.float32) -> ParameterSet:
    """Sample a fresh parameter set.

    Each weight tensor draws from its own stream keyed by ``(seed, name)``, so a
    tensor's initial value depends only on the seed and its name.
    """
    arch.validate()
    return ParameterSet({name: _init_tensor(s, dist, seed, dtype) for name, s in arch.specs.items()},
                        arch.specs)


# --------------------------------------------------------------------------- passes

@dataclass
class ForwardResult:
    logits: np.ndarray
    loss: float | None
    activations: dict
    caches: list
    ctx: Ctx
    dlogits: np.ndarray | None = None

    def predictions(self) -> np.ndarray:
        return self.logits.argmax(axis=1)


def forward(arch: Architecture, params, batch, labels=None, mode="train", frozen=(),
            update_stats=True, keep_activations=False, stats_momentum=L.BN_MOMENTUM) -> ForwardResult:
    """Run the network on ``batch`` of shape ``(N, *input_shape)``.

    Train mode normalises with batch statistics and, unless ``update_stats`` is
    false, updates the running statistics stored in ``params`` in place.  Eval
    mode uses the running statistics.  Batchnorm layers whose tensors are in
    ``frozen`` behave as in eval mode in both modes.
    """
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    batch = np.asarray(batch)
    if batch.shape[1:] != arch.input_shape or batch.shape[0] == 0:
        raise ContractError(f"batch shape {batch.shape} does not match input {arch.input_shape}")
    dtype = params.dtype
    x = batch.astype(dtype, copy=False)
    if x.ndim == 4:
        x = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    ctx = Ctx(train=(mode == "train"), frozen=frozenset(frozen), update_stats=update_stats,
              stats_momentum=stats_momentum)
    caches = []
    activations = {}
    for layer in arch.modules:
        x, cache = layer.forward(x, params, ctx)
        caches.append(cache)
        if keep_activations:
            activations[layer.name] = x
        elif not np.isfinite(x).all():
            raise NumericError(f"non-finite activation in layer {layer.name}", layer.name)
    if keep_activations:
        for name, a in activations.items():
            if not np.isfinite(a).all():
                raise NumericError(f"non-finite activation in layer {name}", name)
    loss = dlogits = None
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != (x.shape[0],):
            raise ContractError("labels must be a vector with one entry per example")
        if labels.min() < 0 or labels.max() >= arch.num_classes:
            raise ContractError("label out of range")
        loss, dlogits = L.softmax_xent(x, labels)
    return ForwardResult(x, loss, activations, caches, ctx, dlogits)


def backward(arch: Architecture, params, result: ForwardResult) -> ParameterSet:
    """Gradient of the mean cross-entropy for the batch seen by ``result``.

    Non-trainable and frozen tensors receive exact zeros.
    """
    if result.dlogits is None:
        raise ContractError("backward needs a forward pass that was given labels")
    ctx = result.ctx
    grads = {}
    modules = arch.modules
    trainable_before = []
    seen = False
    for layer in modules:
        trainable_before.append(seen)
        seen = seen or layer.has_trainable(ctx.frozen)
    d = result.dlogits
    for i in range(len(modules) - 1, -1, -1):
        layer = modules[i]
        if not layer.has_trainable(ctx.frozen) and not trainable_before[i]:
            break
        d = layer.backward(d, result.caches[i], params, ctx, grads, trainable_before[i])
        if d is None:
            break
    out = ParameterSet(specs=params.specs)
    for name, value in params.items():
        g = grads.get(name)
        if g is None or not params.specs[name].trainable or name in ctx.frozen:
            out[name] = np.zeros_like(value)
        else:
            out[name] = g.astype(value.dtype, copy=False)
    return out


def value_and_grad(arch, params, batch, labels, frozen=(), update_stats=True):
    result = forward(arch, params, batch, labels, "train", frozen, update_stats)
    return result.loss, backward(arch, params, result), result


def recalibrate_batchnorm(arch, params, images, max_samples=512) -> ParameterSet:
    """Copy of ``params`` whose running statistics are the batch statistics of ``images``.

    One train-mode pass over at most ``max_samples`` images; every other
    tensor is copied unchanged.
    """
    out = params.copy()
    if any(s.layer_kind == "batchnorm" for s in out.specs.values()):
        forward(arch, out, images[:max_samples], mode="train", stats_momentum=1.0)
    return out


def evaluate(arch, params, images, labels, batch_size=256):
    """Eval-mode mean loss and accuracy over a dataset."""
    n = len(labels)
    total_loss = 0.0
    correct = 0
    for start in range(0, n, batch_size):
        xb = images[start:start + batch_size]
        yb = labels[start:start + batch_size]
        r = forward(arch, params, xb, yb, mode="eval")
        total_loss += r.loss * len(yb)
        correct += int((r.predictions() == yb).sum())
    return total_loss / n, correct / n


# --------------------------------------------------------------------------- heads

@dataclass(frozen=True)
class HeadSpec:
    kind: str = "linear"  # linear or fc2
    hidden: int = 96

    @classmethod
    def parse(cls, text) -> "HeadSpec":
        if isinstance(text, HeadSpec):
            return text
        text = str(text).strip()
        if text == "linear":
            return cls("linear")
        if text.startswith("fc2"):
            rest = text[3:].lstrip(":(").rstrip(")")
            return cls("fc2", int(rest) if rest else 96)
        if text == "keep":
            return cls("keep")
        raise ContractError(f"unknown head spec {text!r}")

    def __str__(self):
        return f"fc2:{self.hidden}" if self.kind == "fc2" else self.kind

    def layers(self, feature_dim, num_classes) -> list:
        if self.kind == "linear":
            return [dense("head.fc", feature_dim, num_classes)]
        if self.kind == "fc2":
            if self.hidden <= 0:
                raise ContractError("fc2 hidden width must be positive")
            return [dense("head.fc1", feature_dim, self.hidden), relu("head.relu"),
                    dense("head.fc2", self.hidden, num_classes)]
        raise ContractError(f"head spec {self.kind!r} does not define layers")


def replace_head(arch: Architecture, params: ParameterSet, head_spec, num_classes: int,
                 seed: int, dist: InitDist = InitDist()):
    """Swap the head for a freshly initialised linear or 2-layer one.

    Body tensors are copied bit-exactly; the new head is never prunable.
    """
    head_spec = HeadSpec.parse(head_spec)
    if head_spec.kind == "keep":
        if num_classes != arch.num_classes:
            raise ContractError("cannot keep the head when the class count changes")
        return arch, params.copy()
    new_arch = Architecture(arch.name, list(arch.layers),
                            head_spec.layers(arch.feature_dim, num_classes),
                            arch.input_shape, num_classes)
    dtype = params.dtype
    tensors = {}
    for name, spec in new_arch.specs.items():
        if spec.head:
            tensors[name] = _init_tensor(spec, dist, seed, dtype)
        else:
            tensors[name] = params[name].copy()
    return new_arch, ParameterSet(tensors, new_arch.specs)


def with_input_shape(arch: Architecture, input_shape) -> Architecture:
    """Same layers, different input extent (channels must match)."""
    return replace(arch, input_shape=tuple(input_shape))
