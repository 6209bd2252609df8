"""Source-task trajectories, checkpoint files and the three reset initialisations."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _binio
from .errors import CheckpointError, ContractError, FormatError
from .pruning import apply_mask
from .zoo import Architecture, InitDist, ParameterSet, init_params

CKPT_MAGIC = b"LTCK"
CKPT_VERSION = 1
MANIFEST = "manifest.txt"

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def checkpoint_bytes(tensors) -> bytes:
    out = bytearray()
    out += CKPT_MAGIC
    out += struct.pack("<HI", CKPT_VERSION, len(tensors))
    for name, arr in tensors.items():
        try:
            code = _DTYPE_CODES[arr.dtype]
        except KeyError:
            raise FormatError(f"{name}: unsupported dtype {arr.dtype}") from None
        out += _binio.pack_name(name)
        out += struct.pack("<B", code)
        out += _binio.pack_shape(arr.shape)
        out += np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes()
    return bytes(out)


def parse_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    r = _binio.Reader(data)
    r.magic(CKPT_MAGIC)
    version, count = r.unpack("<HI")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        name = r.name()
        (code,) = r.unpack("<B")
        if code not in _CODE_DTYPES:
            raise FormatError(f"{name}: unknown dtype code {code}")
        shape = r.shape()
        dtype = _CODE_DTYPES[code]
        n = int(np.prod(shape))
        arr = np.frombuffer(r.take(n * dtype.itemsize), dtype=dtype).reshape(shape)
        tensors[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    r.done()
    return tensors


def save_checkpoint(params, path) -> None:
    _binio.atomic_write(Path(path), checkpoint_bytes(params))


def _attach(tensors, arch: Architecture | None):
    if arch is None:
        return tensors
    if set(tensors) != set(arch.specs):
        raise CheckpointError("checkpoint tensors do not match the architecture")
    for name, spec in arch.specs.items():
        if tensors[name].shape != spec.shape:
            raise CheckpointError(f"{name}: stored shape {tensors[name].shape} != {spec.shape}")
    return ParameterSet({n: tensors[n] for n in arch.specs}, arch.specs)


def load_checkpoint(path, arch: Architecture | None = None):
    """Read a checkpoint; with ``arch`` the result is a :class:`ParameterSet`."""
    return _attach(parse_checkpoint(Path(path).read_bytes()), arch)


@dataclass(frozen=True)
class Checkpoint:
    step: int
    key: str
    val_loss: float


class Trajectory:
    """Ordered checkpoints of one training run.

    With ``root`` set, each checkpoint is a file in that directory and
    ``manifest.txt`` lists ``step val_loss filename`` per line; otherwise the
    serialised bytes are kept in memory.  Either way a stored checkpoint reads
    back bit-exactly.
    """

    def __init__(self, arch: Architecture, root=None):
        self.arch = arch
        self.root = Path(root) if root is not None else None
        self.checkpoints: list[Checkpoint] = []
        self._blobs: dict[str, bytes] = {}
        self._best: int | None = None
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)

    def __len__(self):
        return len(self.checkpoints)

    @property
    def steps(self) -> list[int]:
        return [c.step for c in self.checkpoints]

    @property
    def best_index(self) -> int:
        if self._best is None:
            raise CheckpointError("trajectory is empty")
        return self._best

    @property
    def best_step(self) -> int:
        return self.checkpoints[self.best_index].step

    def record(self, step: int, params, val_loss: float) -> "Trajectory":
        step = int(step)
        val_loss = float(val_loss)
        if not np.isfinite(val_loss):
            raise ContractError(f"validation loss must be finite, got {val_loss}")
        if not self.checkpoints and step != 0:
            raise CheckpointError("the first checkpoint must be step 0")
        if self.checkpoints and step <= self.checkpoints[-1].step:
            raise CheckpointError(f"step {step} does not follow {self.checkpoints[-1].step}")
        key = f"step_{step:08d}.ltck"
        data = checkpoint_bytes(params)
        if self.root is None:
            self._blobs[key] = data
        else:
            try:
                _binio.atomic_write(self.root / key, data)
            except OSError as exc:
                raise CheckpointError(f"could not write {key}: {exc}") from exc
        self.checkpoints.append(Checkpoint(step, key, val_loss))
        if self._best is None or val_loss < self.checkpoints[self._best].val_loss:
            self._best = len(self.checkpoints) - 1
        if self.root is not None:
            self._write_manifest()
        return self

    def _write_manifest(self):
        lines = "".join(f"{c.step} {c.val_loss!r} {c.key}\n" for c in self.checkpoints)
        _binio.atomic_write(self.root / MANIFEST, lines.encode("utf-8"))

    @classmethod
    def open(cls, root, arch: Architecture) -> "Trajectory":
        traj = cls(arch, root)
        path = Path(root) / MANIFEST
        if not path.exists():
            raise CheckpointError(f"no manifest in {root}")
        for line in path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            step, loss, key = line.split()
            traj.checkpoints.append(Checkpoint(int(step), key, float(loss)))
            if traj._best is None or float(loss) < traj.checkpoints[traj._best].val_loss:
                traj._best = len(traj.checkpoints) - 1
        return traj

    def _raw(self, index: int) -> bytes:
        key = self.checkpoints[index].key
        if self.root is None:
            return self._blobs[key]
        try:
            return (self.root / key).read_bytes()
        except OSError as exc:
            raise CheckpointError(f"missing checkpoint file {key}") from exc

    def params_at(self, step: int) -> ParameterSet:
        for i, c in enumerate(self.checkpoints):
            if c.step == step:
                return _attach(parse_checkpoint(self._raw(i)), self.arch)
        raise CheckpointError(f"no checkpoint at step {step}")

    @property
    def theta0(self) -> ParameterSet:
        return self.params_at(0)

    def best_checkpoint(self):
        """``(step, params)`` at minimum validation loss, earliest on ties."""
        i = self.best_index
        return self.checkpoints[i].step, _attach(parse_checkpoint(self._raw(i)), self.arch)


@dataclass(frozen=True)
class ResetMode:
    """Which weights a pruned network restarts from.

    ``ticket`` is the step-0 initialisation, ``late`` the minimum-validation-loss
    checkpoint, ``random`` a fresh draw at ``seed``, and ``step`` the checkpoint
    recorded at ``step``.
    """

    kind: str = "late"
    seed: int = 0
    step: int = 0

    def __post_init__(self):
        if self.kind not in ("ticket", "late", "random", "step"):
            raise ContractError(f"unknown reset mode {self.kind!r}")


def reset(arch: Architecture, traj: Trajectory, mode: ResetMode, masks,
          dist: InitDist = InitDist()) -> ParameterSet:
    """Masked copy of the chosen source parameters; non-prunable tensors come unmasked."""
    if isinstance(mode, str):
        mode = ResetMode(mode)
    if mode.kind == "ticket":
        source = traj.theta0
    elif mode.kind == "late":
        source = traj.best_checkpoint()[1]
    elif mode.kind == "step":
        source = traj.params_at(mode.step)
    else:
        source = init_params(arch, dist, mode.seed, dtype=traj.theta0.dtype)
    return apply_mask(source, masks)
