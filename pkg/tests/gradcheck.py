"""Per-layer gradient checks against the central-difference oracle (float64).

Each case draws a small random layer and input, projects the output onto a
random direction ``r`` so the scalar loss is ``sum(y * r)``, and compares the
analytic parameter and input gradients with finite differences.
"""
import numpy as np

from tickettransfer import layers as L
from tickettransfer.numeric import finite_diff_gradient, make_rng, relative_error

# Two oracle step sizes; a case passes on the better one.  1e-6 alone lets float64
# roundoff dominate for conv weights feeding a train-mode batchnorm (gradients ~1e-3
# of the loss scale), while 1e-5 alone can step across a ReLU kink.
EPS_STEPS = (1e-6, 1e-5)

LAYER_KINDS = ("dense", "conv2d", "batchnorm", "relu", "maxpool", "avgpool", "flatten",
               "residual-block", "softmax-xent")


def _random_layer(kind, rng):
    n = int(rng.integers(1, 4))
    c = int(rng.integers(1, 4))
    if kind == "dense":
        fin, fout = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        return L.Dense("d", fin, fout, bias=bool(rng.integers(2))), (n, fin), L.Ctx()
    if kind == "conv2d":
        k = int(rng.choice([1, 3]))
        stride = int(rng.choice([1, 2]))
        pad = int(rng.integers(0, 2)) if k == 3 else 0
        h = int(rng.integers(3, 7))
        layer = L.Conv2D("c", c, int(rng.integers(1, 4)), k, stride, pad, bias=bool(rng.integers(2)))
        return layer, (n, h, h + int(rng.integers(0, 2)), c), L.Ctx()
    if kind == "batchnorm":
        spatial = bool(rng.integers(2))
        train = bool(rng.integers(3))  # two thirds of cases in train mode
        shape = (n + 1, 3, 2, c) if spatial else (n + 2, c)
        return L.BatchNorm("b", c), shape, L.Ctx(train=train, update_stats=False)
    if kind == "relu":
        return L.ReLU("r"), (n, 3, 3, c), L.Ctx()
    if kind == "maxpool":
        h = 2 * int(rng.integers(1, 4))
        return L.MaxPool("p", 2), (n, h, h, c), L.Ctx()
    if kind == "avgpool":
        return L.GlobalAvgPool("g"), (n, int(rng.integers(1, 5)), int(rng.integers(1, 5)), c), L.Ctx()
    if kind == "flatten":
        return L.Flatten("f"), (n, int(rng.integers(1, 4)), int(rng.integers(1, 4)), c), L.Ctx()
    if kind == "residual-block":
        stride = int(rng.choice([1, 2]))
        cout = c if (stride == 1 and rng.integers(2)) else int(rng.integers(1, 4))
        h = 2 * int(rng.integers(2, 4))
        return (L.ResidualBlock("blk", c, cout, stride), (n + 1, h, h, c),
                L.Ctx(train=bool(rng.integers(2)), update_stats=False))
    raise ValueError(kind)


def _init(layer, rng):
    params = {}
    for spec in layer.param_specs():
        if spec.role == "running_var":
            params[spec.name] = rng.uniform(0.5, 2.0, spec.shape)
        else:
            params[spec.name] = rng.standard_normal(spec.shape)
    return params


def check_case(kind, seed):
    """Worst relative error over every tensor of one case, best over the oracle steps."""
    return min(_check_case(kind, seed, eps) for eps in EPS_STEPS)


def _check_case(kind, seed, eps):
    rng = make_rng(seed, "gradcheck", kind)
    if kind == "softmax-xent":
        n, k = int(rng.integers(1, 5)), int(rng.integers(2, 6))
        logits = rng.standard_normal((n, k)) * 3
        labels = rng.integers(0, k, n)
        _, grad = L.softmax_xent(logits, labels)
        num = finite_diff_gradient(lambda p: L.softmax_xent(p["x"], labels)[0], {"x": logits}, eps)
        return relative_error(grad, num["x"])

    layer, shape, ctx = _random_layer(kind, rng)
    params = _init(layer, rng)
    x = rng.standard_normal(shape)
    y, _ = layer.forward(x, params, ctx)
    r = rng.standard_normal(y.shape)

    def loss(p):
        out, _ = layer.forward(p["__x__"], p, ctx)
        return float(np.sum(out * r))

    _, cache = layer.forward(x, params, ctx)
    grads = {}
    dx = layer.backward(r, cache, params, ctx, grads, need_dx=True)
    trainable = [s.name for s in layer.param_specs() if s.trainable]
    everything = dict(params, __x__=x.copy())
    num = finite_diff_gradient(loss, everything, eps, names=trainable + ["__x__"])
    errs = [relative_error(dx, num["__x__"])]
    errs += [relative_error(grads[name], num[name]) for name in trainable]
    return max(errs)


def worst_error(kind, cases=100, seed=0):
    return max(check_case(kind, seed * 100_000 + i) for i in range(cases))
