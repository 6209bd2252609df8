"""Layer kernels with hand-written backward passes.

Spatial activations travel between layers in channel-last ``(N, H, W, C)``
layout so that a convolution is a single ``(N*H*W, k*k*C) @ (k*k*C, O)``
matrix product whose result is already channel-last.  Flat activations are
``(N, F)``.  :class:`Flatten` converts back to the conventional ``N, C, H, W``
ordering before flattening, so dense weights see standard feature order.
Weights keep the conventional ``(O, C, k, k)`` shape.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ArchitectureError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class ParamSpec:
    """Static description of one named tensor of a model."""

    name: str
    shape: tuple
    role: str  # weight, bias, scale, shift, running_mean, running_var
    layer_kind: str  # conv2d, dense, batchnorm
    fan_in: int = 0
    prunable: bool = False
    head: bool = False

    @property
    def trainable(self) -> bool:
        return self.role not in ("running_mean", "running_var")

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass
class Ctx:
    train: bool = True
    frozen: frozenset = field(default_factory=frozenset)
    update_stats: bool = True
    stats_momentum: float = BN_MOMENTUM


class Layer:
    kind = "layer"

    def __init__(self, name: str):
        self.name = name

    def param_specs(self) -> list[ParamSpec]:
        return []

    def has_trainable(self, frozen) -> bool:
        return any(s.trainable and s.name not in frozen for s in self.param_specs())

    def forward(self, x, P, ctx):
        raise NotImplementedError

    def backward(self, dy, cache, P, ctx, grads, need_dx=True):
        raise NotImplementedError


def _colsum(x2):
    # BLAS matrix-vector product; much faster than sum(axis=0) for tall, narrow arrays
    return np.ones(x2.shape[0], dtype=x2.dtype) @ x2


def _pad(x, p):
    if not p:
        return x
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
    xp[:, p:p + h, p:p + w] = x
    return xp


def _im2col(xp, k, stride, ho, wo):
    n, c = xp.shape[0], xp.shape[3]
    sn, sh, sw, sc = xp.strides
    # read-only window view; the reshape makes the one contiguous copy
    view = as_strided(xp, (n, ho, wo, k, k, c), (sn, sh * stride, sw * stride, sh, sw, sc),
                      writeable=False)
    return view.reshape(n * ho * wo, k * k * c)


def _col2im(dcols, shape, k, stride, pad, ho, wo):
    n, h, w, c = shape
    dcols = dcols.reshape(n, ho, wo, k, k, c)
    dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=dcols.dtype)
    for ky in range(k):
        for kx in range(k):
            dxp[:, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride] += dcols[:, :, :, ky, kx]
    if pad:
        return dxp[:, pad:pad + h, pad:pad + w]
    return dxp


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, name, cin, cout, k=3, stride=1, pad=None, bias=False, prunable=True, head=False):
        super().__init__(name)
        if k not in (1, 3):
            raise ArchitectureError(f"{name}: kernel must be 1 or 3, got {k}")
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        self.pad = (k // 2) if pad is None else pad
        self.bias = bias
        self.prunable = prunable
        self.head = head

    def param_specs(self):
        fan_in = self.cin * self.k * self.k
        specs = [ParamSpec(f"{self.name}.weight", (self.cout, self.cin, self.k, self.k), "weight",
                           "conv2d", fan_in, self.prunable, self.head)]
        if self.bias:
            specs.append(ParamSpec(f"{self.name}.bias", (self.cout,), "bias", "conv2d", fan_in,
                                   False, self.head))
        return specs

    def out_hw(self, h, w):
        return ((h + 2 * self.pad - self.k) // self.stride + 1,
                (w + 2 * self.pad - self.k) // self.stride + 1)

    def _wmat(self, weight):
        # (O, C, k, k) -> (k*k*C, O), matching the column order of _im2col
        return weight.transpose(2, 3, 1, 0).reshape(-1, self.cout)

    def forward(self, x, P, ctx):
        n, h, w, c = x.shape
        ho, wo = self.out_hw(h, w)
        cols = _im2col(_pad(x, self.pad), self.k, self.stride, ho, wo)
        y = (cols @ self._wmat(P[f"{self.name}.weight"])).reshape(n, ho, wo, self.cout)
        if self.bias:
            y += P[f"{self.name}.bias"]
        return y, (x.shape, cols, ho, wo)

    def backward(self, dy, cache, P, ctx, grads, need_dx=True):
        shape, cols, ho, wo = cache
        wname = f"{self.name}.weight"
        dym = dy.reshape(-1, self.cout)
        if wname not in ctx.frozen:
            g = cols.T @ dym
            grads[wname] = g.reshape(self.k, self.k, self.cin, self.cout).transpose(3, 2, 0, 1)
        if self.bias and f"{self.name}.bias" not in ctx.frozen:
            grads[f"{self.name}.bias"] = dym.sum(axis=0)
        if not need_dx:
            return None
        weight = P[wname]
        if self.stride == 1 and 2 * self.pad == self.k - 1:
            # same-size conv: input gradient is a conv of dy with the flipped, transposed kernel
            flipped = weight[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(-1, self.cin)
            dcols = _im2col(_pad(dy, self.pad), self.k, 1, shape[1], shape[2])
            return (dcols @ flipped).reshape(shape)
        dcols = dym @ self._wmat(weight).T
        return _col2im(dcols, shape, self.k, self.stride, self.pad, ho, wo)


class Dense(Layer):
    kind = "dense"

    def __init__(self, name, fin, fout, bias=True, prunable=False, head=False):
        super().__init__(name)
        self.fin, self.fout, self.bias = fin, fout, bias
        self.prunable = prunable
        self.head = head

    def param_specs(self):
        specs = [ParamSpec(f"{self.name}.weight", (self.fout, self.fin), "weight", "dense",
                           self.fin, self.prunable, self.head)]
        if self.bias:
            specs.append(ParamSpec(f"{self.name}.bias", (self.fout,), "bias", "dense", self.fin,
                                   False, self.head))
        return specs

    def forward(self, x, P, ctx):
        y = x @ P[f"{self.name}.weight"].T
        if self.bias:
            y = y + P[f"{self.name}.bias"]
        return y, x

    def backward(self, dy, cache, P, ctx, grads, need_dx=True):
        x = cache
        wname = f"{self.name}.weight"
        if wname not in ctx.frozen:
            grads[wname] = dy.T @ x
        if self.bias and f"{self.name}.bias" not in ctx.frozen:
            grads[f"{self.name}.bias"] = dy.sum(axis=0)
        return dy @ P[wname] if need_dx else None


class BatchNorm(Layer):
    """Per-channel batch normalisation for ``(N, H, W, C)`` or ``(N, F)`` input.

    A batchnorm whose affine tensors are frozen always normalises with its
    running statistics and never updates them.
    """

    kind = "batchnorm"

    def __init__(self, name, channels, head=False):
        super().__init__(name)
        self.channels = channels
        self.head = head

    def param_specs(self):
        c = (self.channels,)
        mk = lambda role: ParamSpec(f"{self.name}.{role}", c, role, "batchnorm", 0, False, self.head)
        return [mk("scale"), mk("shift"), mk("running_mean"), mk("running_var")]

    def forward(self, x, P, ctx):
        nm = self.name
        gamma, beta = P[f"{nm}.scale"], P[f"{nm}.shift"]
        rm, rv = P[f"{nm}.running_mean"], P[f"{nm}.running_var"]
        frozen = f"{nm}.scale" in ctx.frozen
        x2 = x.reshape(-1, self.channels)
        m = x2.shape[0]
        if ctx.train and not frozen:
            mu = _colsum(x2) / m
            xc = x2 - mu
            var = _colsum(xc * xc) / m
            inv = 1.0 / np.sqrt(var + BN_EPS)
            if ctx.update_stats:
                unbiased = var * (m / max(m - 1, 1))
                k = ctx.stats_momentum
                rm *= 1.0 - k
                rm += k * mu
                rv *= 1.0 - k
                rv += k * unbiased
            batch = True
        else:
            xc = x2 - rm
            inv = 1.0 / np.sqrt(rv + BN_EPS)
            batch = False
        xhat = xc * inv
        y2 = gamma * xhat + beta
        return y2.reshape(x.shape), (x.shape, xhat, inv, batch)

    def backward(self, dy, cache, P, ctx, grads, need_dx=True):
        shape, xhat, inv, batch = cache
        nm = self.name
        dy2 = dy.reshape(-1, self.channels)
        if f"{nm}.scale" not in ctx.frozen:
            grads[f"{nm}.scale"] = _colsum(dy2 * xhat)
            grads[f"{nm}.shift"] = _colsum(dy2)
        if not need_dx:
            return None
        dxhat = dy2 * P[f"{nm}.scale"]
        if batch:
            m = dy2.shape[0]
            dx2 = (inv / m) * (m * dxhat - _colsum(dxhat) - xhat * _colsum(dxhat * xhat))
        else:
            dx2 = dxhat * inv
        return dx2.reshape(shape)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, P, ctx):
        mask = x > 0
        return np.maximum(x, 0), mask

    def backward(self, dy, cache, P, ctx, grads, need_dx=True):
        return dy * cache if need_dx else None


class MaxPool(Layer):
    kind = "maxpool"

    def __init__(self, name, k=2):
        super().__init__(name)
        self.k = k

    def forward(self, x, P, ctx):
        n, h, w, c = x.shape
        k = self.k
        if h % k or w % k:
            raise ArchitectureError(f"{self.name}: {h}x{w} not divisible by pool size {k}")
        ho, wo = h // k, w // k
        blocks = x.reshape(n, ho, k, wo, k, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, k * k)
        idx = blocks.argmax(axis=-1)
        y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        return y, (x.shape, idx)

    def backward(self, dy, cache, P, ctx, grads, need_dx=True):
        if not need_dx:
            return None
        shape, idx = cache
        n, h, w, c = shape
        k = self.k
        ho, wo = h // k, w // k
        dblocks = np.zeros((n, ho, wo, c, k * k), dtype=dy.dtype)
        np.put_along_axis(dblocks, idx[..., None], dy[..., None], axis=-1)
        return dblocks.reshape(n, ho, wo, c, k, k).transpose(0, 1, 4, 2, 5, 3).reshape(shape)


class GlobalAvgPool(Layer):
    """Average over the spatial extent; ``(N, H, W, C) -> (N, C)``."""

    kind = "avgpool"

    def forward(self, x, P, ctx):
        return x.mean(axis=(1, 2)), x.shape

    def backward(self, dy, cache, P, ctx, grads, need_dx=True):
        if not need_dx:
            return None
        n, h, w, c = cache
        return np.broadcast_to((dy / (h * w))[:, None, None, :], cache).copy()


class Flatten(Layer):
    """``(N, H, W, C) -> (N, C*H*W)`` in conventional NCHW feature order."""

    kind = "flatten"

    def forward(self, x, P, ctx):
        if x.ndim == 2:
            return x, None
        return x.transpose(0, 3, 1, 2).reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache, P, ctx, grads, need_dx=True):
        if not need_dx:
            return None
        if cache is None:
            return dy
        n, h, w, c = cache
        return dy.reshape(n, c, h, w).transpose(0, 2, 3, 1)


class ResidualBlock(Layer):
    """Two 3x3 conv/batchnorm stages plus an identity or 1x1-projection shortcut."""

    kind = "residual-block"

    def __init__(self, name, cin, cout, stride=1, prunable=True):
        super().__init__(name)
        self.cin, self.cout, self.stride = cin, cout, stride
        self.main = [
            Conv2D(f"{name}.conv1", cin, cout, 3, stride, prunable=prunable),
            BatchNorm(f"{name}.bn1", cout),
            ReLU(f"{name}.relu1"),
            Conv2D(f"{name}.conv2", cout, cout, 3, 1, prunable=prunable),
            BatchNorm(f"{name}.bn2", cout),
        ]
        if stride != 1 or cin != cout:
            self.shortcut = [Conv2D(f"{name}.proj", cin, cout, 1, stride, pad=0, prunable=prunable),
                             BatchNorm(f"{name}.proj_bn", cout)]
        else:
            self.shortcut = []

    def param_specs(self):
        return [s for layer in self.main + self.shortcut for s in layer.param_specs()]

    def forward(self, x, P, ctx):
        h = x
        main_caches = []
        for layer in self.main:
            h, c = layer.forward(h, P, ctx)
            main_caches.append(c)
        s = x
        sc_caches = []
        for layer in self.shortcut:
            s, c = layer.forward(s, P, ctx)
            sc_caches.append(c)
        pre = h + s
        mask = pre > 0
        return np.maximum(pre, 0), (main_caches, sc_caches, mask)

    def backward(self, dy, cache, P, ctx, grads, need_dx=True):
        main_caches, sc_caches, mask = cache
        dpre = dy * mask
        d = dpre
        for i in range(len(self.main) - 1, -1, -1):
            layer = self.main[i]
            inner_need = need_dx or any(l.has_trainable(ctx.frozen) for l in self.main[:i])
            d = layer.backward(d, main_caches[i], P, ctx, grads, inner_need)
            if d is None:
                break
        ds = dpre
        for i in range(len(self.shortcut) - 1, -1, -1):
            layer = self.shortcut[i]
            inner_need = need_dx or any(l.has_trainable(ctx.frozen) for l in self.shortcut[:i])
            ds = layer.backward(ds, sc_caches[i], P, ctx, grads, inner_need)
            if ds is None:
                break
        if not need_dx:
            return None
        return d + ds


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its gradient with respect to ``logits``."""
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    total = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(total)
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = ez / total
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return float(loss), grad.astype(logits.dtype, copy=False)
