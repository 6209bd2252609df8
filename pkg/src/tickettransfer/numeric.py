"""Dense tensor helpers, deterministic random streams and the gradient oracle.

Tensors are plain :class:`numpy.ndarray` objects in row-major (C) order with
dtype ``float32`` (training) or ``float64`` (gradient checks).

Random streams use the Philox-4x64-10 counter-based generator.  A stream is
addressed by an integer seed plus any number of integer or string keys; string
keys are hashed with CRC-32 so the address is stable across platforms and
Python hash randomisation.
"""
from __future__ import annotations

import zlib
from typing import Callable, Mapping

import numpy as np

from .errors import ContractError, OracleError

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    part = int(part)
    if part < 0:
        raise ContractError(f"stream keys must be non-negative, got {part}")
    return part


def make_rng(seed: int, *keys) -> np.random.Generator:
    """Return a Philox generator addressed by ``seed`` and ``keys``.

    Equal arguments give bit-identical streams; different keys give
    statistically independent streams.
    """
    entropy = [_key(seed)] + [_key(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Element-wise product with strict shape and dtype checking."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise ContractError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return a * b


def finite_diff_gradient(
    loss_fn: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-6,
    names=None,
    indices: Mapping[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``loss_fn`` at ``params``.

    Every coordinate of every tensor (or only those in ``names``) is perturbed
    in place by +-eps and restored afterwards.  Tensors not in ``names`` get a
    zero gradient.  With ``indices``, only the listed flat coordinates of each
    named tensor are perturbed and the remaining entries are NaN.
    """
    if not eps > 0:
        raise ContractError("eps must be positive")
    selected = set(params) if names is None else set(names)
    grads = {}
    for name, tensor in params.items():
        if tensor.dtype != np.float64:
            raise ContractError(f"{name}: finite differences need float64, got {tensor.dtype}")
        g = np.zeros_like(tensor)
        if name in selected:
            flat = tensor.reshape(-1)
            gflat = g.reshape(-1)
            coords = range(flat.size)
            if indices is not None and name in indices:
                gflat[:] = np.nan
                coords = np.asarray(indices[name], dtype=np.int64)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                up = float(loss_fn(params))
                flat[i] = orig - eps
                down = float(loss_fn(params))
                flat[i] = orig
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise OracleError(f"non-finite loss while perturbing {name}[{i}]")
                gflat[i] = (up - down) / (2.0 * eps)
        grads[name] = g
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Normwise relative error ``max|a - n| / max(max|a|, max|n|)``.

    Entries where ``numeric`` is NaN (not sampled) are ignored.  Returns 0 when
    both tensors are identically zero.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    keep = ~np.isnan(numeric)
    analytic, numeric = analytic[keep], numeric[keep]
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    diff = np.max(np.abs(analytic - numeric), initial=0.0)
    if scale == 0.0:
        return float(diff)
    return float(diff / scale)


def all_finite(*arrays) -> bool:
    return all(bool(np.all(np.isfinite(a))) for a in arrays)
