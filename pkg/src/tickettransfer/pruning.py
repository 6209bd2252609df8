"""Binary masks and unstructured magnitude pruning.

A mask set is a plain ``dict`` mapping each prunable tensor name to a boolean
array of the same shape.  Pruning never revives a weight: ``True`` means the
weight survives.

Rounding rules, chosen so density assertions are exact integers:

* an iterative round removes ``floor(rate * n_unmasked)`` weights per layer;
* a one-shot pass keeps ``ceil(target * n_layer)`` weights per layer.

Ties in magnitude are broken by flat index: the lower index is pruned first.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _binio
from .errors import ContractError, DegenerateLayerError, MaskError

# guards floor/ceil against products such as 0.21 * 100 = 21.000000000000004
_ROUND_SLACK = 1e-9

MASK_MAGIC = b"LTMK"
MASK_VERSION = 1


def _floor(x: float) -> int:
    return math.floor(x + _ROUND_SLACK)


def _ceil(x: float) -> int:
    return math.ceil(x - _ROUND_SLACK)


@dataclass
class PruneSchedule:
    """How masks are derived from trained weights.

    ``rates`` maps a layer kind (``conv2d``/``dense``) to the fraction of the
    remaining weights removed per iterative round.  ``target_densities`` lists
    the one-shot levels.  ``scope`` is ``layer`` (rank within each tensor) or
    ``global`` (rank across all tensors that share a nonzero rate).
    """

    mode: str = "iterative"
    rates: dict = field(default_factory=lambda: {"conv2d": 0.2, "dense": 0.0})
    rounds: int = 0
    target_densities: tuple = ()
    scope: str = "layer"

    def __post_init__(self):
        if self.mode not in ("iterative", "one-shot"):
            raise ContractError(f"unknown schedule mode {self.mode!r}")
        if self.scope not in ("layer", "global"):
            raise ContractError(f"unknown pruning scope {self.scope!r}")
        for kind, rate in self.rates.items():
            if not 0.0 <= rate < 1.0:
                raise ContractError(f"rate for {kind} must lie in [0, 1), got {rate}")
        if self.rounds < 0:
            raise ContractError("rounds must be non-negative")
        for d in self.target_densities:
            if not 0.0 < d <= 1.0:
                raise ContractError(f"target density must lie in (0, 1], got {d}")

    def rate_for(self, layer_kind: str) -> float:
        return float(self.rates.get(layer_kind, 0.0))

    def predicted_survivors(self, n: int, layer_kind: str = "conv2d", rounds=None) -> int:
        """Exact survivor count after ``rounds`` iterative rounds on ``n`` weights."""
        rate = self.rate_for(layer_kind)
        for _ in range(self.rounds if rounds is None else rounds):
            n -= _floor(rate * n)
        return n


# --------------------------------------------------------------------------- masks

def full_masks(params) -> dict[str, np.ndarray]:
    return {name: np.ones(params[name].shape, dtype=bool) for name in params.prunable_names()}


def check_masks(params, masks) -> None:
    """Raise :class:`MaskError` unless ``masks`` exactly covers the prunable tensors."""
    expected = set(params.prunable_names())
    if set(masks) != expected:
        missing = sorted(expected - set(masks))
        extra = sorted(set(masks) - expected)
        raise MaskError(f"mask set does not match prunable tensors (missing={missing}, extra={extra})")
    for name, m in masks.items():
        if m.shape != params[name].shape:
            raise MaskError(f"{name}: mask shape {m.shape} != weight shape {params[name].shape}")
        if m.dtype != bool:
            raise MaskError(f"{name}: masks must be boolean, got {m.dtype}")
        if not m.any():
            raise MaskError(f"{name}: mask removes every weight")


def restrict_masks(masks, params) -> dict[str, np.ndarray]:
    """Keep the masks that name a prunable tensor of ``params``; add all-ones for the rest."""
    out = {}
    for name in params.prunable_names():
        out[name] = masks[name].copy() if name in masks else np.ones(params[name].shape, bool)
    return out


def apply_mask(params, masks):
    """Zero masked weights; every other value is copied bit-exactly."""
    check_masks(params, masks)
    out = params.copy()
    for name, m in masks.items():
        out[name] = np.where(m, out[name], out[name].dtype.type(0))
    return out


def magnitude_prune_layer(weights: np.ndarray, mask: np.ndarray, rate: float) -> np.ndarray:
    """Remove ``floor(rate * n_alive)`` of the surviving weights with the smallest |w|."""
    weights = np.asarray(weights)
    mask = np.asarray(mask, dtype=bool)
    if weights.shape != mask.shape:
        raise ContractError(f"shape mismatch: {weights.shape} vs {mask.shape}")
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"rate must lie in [0, 1), got {rate}")
    alive = np.flatnonzero(mask)
    k = _floor(rate * alive.size)
    return _drop_smallest(weights, mask, alive, k)


def _drop_smallest(weights, mask, alive, k):
    out = mask.copy()
    if k > 0:
        mags = np.abs(weights.reshape(-1)[alive])
        order = np.argsort(mags, kind="stable")
        out.reshape(-1)[alive[order[:k]]] = False
    if not out.any():
        raise DegenerateLayerError("pruning would remove every weight of the layer")
    return out


def _targets(params, masks, schedule_or_kinds):
    if isinstance(schedule_or_kinds, PruneSchedule):
        return [n for n in masks if schedule_or_kinds.rate_for(params.specs[n].layer_kind) > 0]
    kinds = set(schedule_or_kinds)
    return [n for n in masks if params.specs[n].layer_kind in kinds]


def prune_round(params, masks, schedule: PruneSchedule) -> dict[str, np.ndarray]:
    """One iterative round: each prunable tensor loses its kind's rate of survivors."""
    check_masks(params, masks)
    out = {name: m.copy() for name, m in masks.items()}
    names = _targets(params, masks, schedule)
    if schedule.scope == "global":
        for kind in {params.specs[n].layer_kind for n in names}:
            group = [n for n in names if params.specs[n].layer_kind == kind]
            alive_total = sum(int(masks[n].sum()) for n in group)
            k = _floor(schedule.rate_for(kind) * alive_total)
            out.update(_global_drop(params, masks, group, k))
        return out
    for name in names:
        rate = schedule.rate_for(params.specs[name].layer_kind)
        out[name] = magnitude_prune_layer(params[name], masks[name], rate)
    return out


def _global_drop(params, masks, names, k):
    # ties across tensors fall to the tensor listed first, then to the lower flat index
    mags = np.concatenate([np.abs(params[n].reshape(-1)[masks[n].reshape(-1)]).astype(np.float64)
                           for n in names])
    owners = np.concatenate([np.full(int(masks[n].sum()), i) for i, n in enumerate(names)])
    local = np.concatenate([np.flatnonzero(masks[n]) for n in names])
    order = np.argsort(mags, kind="stable")[:k]
    out = {n: masks[n].copy() for n in names}
    for idx in order:
        out[names[owners[idx]]].reshape(-1)[local[idx]] = False
    for n in names:
        if not out[n].any():
            raise DegenerateLayerError(f"{n}: global pruning removed every weight")
    return out


def one_shot_prune(params, masks, target_density: float, kinds=("conv2d",)) -> dict[str, np.ndarray]:
    """Prune each tensor of the given kinds straight to ``ceil(target * n)`` survivors."""
    check_masks(params, masks)
    if not 0.0 < target_density <= 1.0:
        raise ContractError(f"target density must lie in (0, 1], got {target_density}")
    out = {name: m.copy() for name, m in masks.items()}
    for name in _targets(params, masks, kinds):
        m = masks[name]
        keep = _ceil(target_density * m.size)
        alive = np.flatnonzero(m)
        if keep > alive.size:
            raise ContractError(
                f"{name}: target density {target_density} exceeds current density {alive.size / m.size}")
        out[name] = _drop_smallest(params[name], m, alive, alive.size - keep)
    return out


def iterative_masks(params, schedule: PruneSchedule, masks=None) -> list[dict[str, np.ndarray]]:
    """Masks after rounds 0..schedule.rounds, all ranked by the magnitudes in ``params``."""
    masks = full_masks(params) if masks is None else masks
    out = [masks]
    for _ in range(schedule.rounds):
        masks = prune_round(params, masks, schedule)
        out.append(masks)
    return out


# --------------------------------------------------------------------------- accounting

def survivors(masks) -> dict[str, int]:
    return {name: int(m.sum()) for name, m in masks.items()}


def density(masks, params=None, scope="prunable") -> float:
    """Fraction of weights left.

    ``prunable`` counts only masked tensors; ``whole`` divides the surviving
    weights plus every unmasked trainable tensor by the trainable total of
    ``params``.
    """
    alive = sum(int(m.sum()) for m in masks.values())
    total = sum(m.size for m in masks.values())
    if scope == "prunable":
        return alive / total if total else 1.0
    if scope == "whole":
        if params is None:
            raise ContractError("whole-model density needs the parameter set")
        other = sum(v.size for n, v in params.items() if params.specs[n].trainable and n not in masks)
        return (alive + other) / (total + other)
    raise ContractError(f"unknown density scope {scope!r}")


# --------------------------------------------------------------------------- file format

def save_masks(masks, path) -> None:
    """Write the LTMK format: bit-packed masks, little-endian."""
    out = bytearray()
    out += MASK_MAGIC
    out += struct.pack("<HI", MASK_VERSION, len(masks))
    for name, m in masks.items():
        out += _binio.pack_name(name)
        out += _binio.pack_shape(m.shape)
        out += np.packbits(m.reshape(-1).astype(np.uint8), bitorder="little").tobytes()
    _binio.atomic_write(Path(path), bytes(out))


def load_masks(path) -> dict[str, np.ndarray]:
    r = _binio.Reader(Path(path).read_bytes())
    r.magic(MASK_MAGIC)
    version, count = r.unpack("<HI")
    if version != MASK_VERSION:
        raise _binio.FormatError(f"unsupported mask version {version}")
    masks = {}
    for _ in range(count):
        name = r.name()
        shape = r.shape()
        n = int(np.prod(shape))
        packed = np.frombuffer(r.take((n + 7) // 8), dtype=np.uint8)
        bits = np.unpackbits(packed, bitorder="little")[:n]
        masks[name] = bits.astype(bool).reshape(shape)
    r.done()
    return masks
