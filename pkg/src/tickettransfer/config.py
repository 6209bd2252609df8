"""Plain-text experiment configuration.

An INI file with one section per structured field of :class:`ExperimentConfig`::

    [experiment]
    arch = micro-resnet
    levels = 1, 3, 5, 7
    reset = late, ticket, random
    freeze = none
    head_spec = linear
    seeds = 0, 1, 2
    bn_recalibrate = source
    dtype = float32

    [init]
    kind = fan-in-scaled-uniform
    gain = 1.0
    residual_scale = 0.0

    [source]
    name = synth10
    num_classes = 10
    shape = 3x16x16
    samples_per_class = 100
    noise = 0.3

    [target]
    name = synth5
    path = data/target        ; LTDS prefix: <path>.train.ltds, <path>.test.ltds

    [schedule]
    mode = iterative
    rates = conv2d:0.2, dense:0.0
    rounds = 11

    [source_hyper]
    lr_schedule = stepped:0.05
    total_steps = 400

Keys are the dataclass field names.  Omitted keys keep their defaults.
"""
from __future__ import annotations

import configparser
from dataclasses import fields
from pathlib import Path

from .data import SyntheticSpec
from .errors import ConfigError
from .harness import ExperimentConfig, Hyperparams, TaskConfig
from .pruning import PruneSchedule
from .zoo import InitDist

_SYNTH_KEYS = {f.name for f in fields(SyntheticSpec)} - {"val_fraction"}
_TASK_KEYS = {f.name for f in fields(TaskConfig)} - {"synthetic"}
_SECTIONS = {"experiment", "init", "source", "target", "schedule", "source_hyper", "target_hyper"}


def _ints(text: str) -> tuple:
    return tuple(int(t) for t in _items(text))


def _floats(text: str) -> tuple:
    return tuple(float(t) for t in _items(text))


def _items(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _shape(text: str) -> tuple:
    parts = text.lower().replace("×", "x").split("x")
    if len(parts) != 3:
        raise ValueError(f"shape must look like CxHxW, got {text!r}")
    return tuple(int(p) for p in parts)


def _opt_int(text: str):
    return None if text.strip().lower() == "none" else int(text)


def _pairs(text: str) -> list[tuple[str, str]]:
    out = []
    for item in _items(text):
        key, sep, value = item.partition(":")
        if not sep:
            raise ValueError(f"expected key:value, got {item!r}")
        out.append((key.strip(), value.strip()))
    return out


def parse_lr_schedule(text: str, total_steps: int) -> tuple:
    """``stepped:0.05`` or explicit ``0:0.05, 200:0.01`` pairs."""
    text = text.strip()
    if text.startswith("stepped:"):
        return Hyperparams.stepped(float(text.split(":", 1)[1]), total_steps).lr_schedule
    return tuple((int(s), float(lr)) for s, lr in _pairs(text))


def _check_keys(section, allowed):
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"[{section.name}] unknown keys: {', '.join(sorted(unknown))}")


def _task(section, default: TaskConfig) -> TaskConfig:
    _check_keys(section, _TASK_KEYS | _SYNTH_KEYS)
    task = {}
    for key in ("name", "path"):
        if key in section:
            task[key] = section[key]
    for key, conv in (("data_seed", int), ("val_fraction", float)):
        if key in section:
            task[key] = conv(section[key])
    if "augment" in section:
        task["augment"] = _bool(section["augment"])
    synth = {}
    conv_for = {"num_classes": int, "samples_per_class": int, "noise": float,
                "test_per_class": _opt_int, "first_motif": int, "jitter": _opt_int,
                "shape": _shape}
    for key in _SYNTH_KEYS & set(section):
        synth[key] = conv_for[key](section[key])
    if "path" in task:
        if synth:
            raise ConfigError(f"[{section.name}] give either path or synthetic keys, not both")
        return TaskConfig(task.pop("name", default.name), None, **task)
    base = default.synthetic or SyntheticSpec()
    if "val_fraction" in task:
        synth["val_fraction"] = task["val_fraction"]
    spec = SyntheticSpec(**{**{f.name: getattr(base, f.name) for f in fields(SyntheticSpec)}, **synth})
    spec.validate()
    return TaskConfig(task.pop("name", default.name), spec,
                      **{k: v for k, v in task.items() if k != "name"})


def _hyper(section, default: Hyperparams) -> Hyperparams:
    allowed = {f.name for f in fields(Hyperparams)}
    _check_keys(section, allowed)
    kw = {"momentum": default.momentum, "weight_decay": default.weight_decay,
          "batch_size": default.batch_size, "total_steps": default.total_steps,
          "eval_interval": default.eval_interval}
    for key, conv in (("momentum", float), ("weight_decay", float), ("batch_size", int),
                      ("total_steps", int), ("eval_interval", int)):
        if key in section:
            kw[key] = conv(section[key])
    if "lr_schedule" in section:
        sched = parse_lr_schedule(section["lr_schedule"], kw["total_steps"])
    elif kw["total_steps"] != default.total_steps:
        # rescale the default drop points to the new step budget
        sched = Hyperparams.stepped(default.lr_schedule[0][1], kw["total_steps"]).lr_schedule
    else:
        sched = default.lr_schedule
    return Hyperparams(sched, **kw)


def _schedule(section) -> PruneSchedule:
    _check_keys(section, {f.name for f in fields(PruneSchedule)})
    kw = {}
    if "mode" in section:
        kw["mode"] = section["mode"]
    if "scope" in section:
        kw["scope"] = section["scope"]
    if "rounds" in section:
        kw["rounds"] = int(section["rounds"])
    if "rates" in section:
        kw["rates"] = {k: float(v) for k, v in _pairs(section["rates"])}
    if "target_densities" in section:
        kw["target_densities"] = _floats(section["target_densities"])
    return PruneSchedule(**kw)


def _init(section, default: InitDist) -> InitDist:
    _check_keys(section, {f.name for f in fields(InitDist)})
    kw = {"kind": default.kind, "gain": default.gain, "residual_scale": default.residual_scale}
    if "kind" in section:
        kw["kind"] = section["kind"]
    for key in ("gain", "residual_scale"):
        if key in section:
            kw[key] = float(section[key])
    return InitDist(**kw)


def parse_config(text: str) -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from INI text; raises :class:`ConfigError`."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    unknown = set(cp.sections()) - _SECTIONS
    if unknown:
        raise ConfigError(f"unknown sections: {', '.join(sorted(unknown))}")
    default = ExperimentConfig()
    kw = {}
    try:
        if cp.has_section("experiment"):
            sec = cp["experiment"]
            _check_keys(sec, {"arch", "levels", "reset", "freeze", "head_spec", "seeds",
                              "bn_recalibrate", "dtype"})
            for key in ("arch", "freeze", "head_spec", "bn_recalibrate", "dtype"):
                if key in sec:
                    kw[key] = sec[key].strip()
            if "levels" in sec:
                kw["levels"] = _ints(sec["levels"]) or None
            if "reset" in sec:
                kw["reset"] = tuple(_items(sec["reset"]))
            if "seeds" in sec:
                kw["seeds"] = _ints(sec["seeds"])
        if cp.has_section("init"):
            kw["init"] = _init(cp["init"], default.init)
        for name in ("source", "target"):
            if cp.has_section(name):
                kw[name] = _task(cp[name], getattr(default, name))
        if cp.has_section("schedule"):
            kw["schedule"] = _schedule(cp["schedule"])
        for name in ("source_hyper", "target_hyper"):
            if cp.has_section(name):
                kw[name] = _hyper(cp[name], getattr(default, name))
        return ExperimentConfig(**kw)
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def _task_lines(task: TaskConfig) -> list[str]:
    lines = [f"name = {task.name}", f"data_seed = {task.data_seed}",
             f"augment = {str(task.augment).lower()}"]
    if task.path is not None:
        return lines + [f"path = {task.path}", f"val_fraction = {task.val_fraction!r}"]
    s = task.synthetic
    lines += [f"num_classes = {s.num_classes}", f"shape = {'x'.join(map(str, s.shape))}",
              f"samples_per_class = {s.samples_per_class}", f"noise = {s.noise!r}",
              f"val_fraction = {s.val_fraction!r}", f"first_motif = {s.first_motif}",
              f"test_per_class = {s.test_per_class}", f"jitter = {s.jitter}"]
    return lines


def _hyper_lines(h: Hyperparams) -> list[str]:
    sched = ", ".join(f"{s}:{lr!r}" for s, lr in h.lr_schedule)
    return [f"lr_schedule = {sched}", f"momentum = {h.momentum!r}",
            f"weight_decay = {h.weight_decay!r}", f"batch_size = {h.batch_size}",
            f"total_steps = {h.total_steps}", f"eval_interval = {h.eval_interval}"]


def format_config(cfg: ExperimentConfig) -> str:
    """Inverse of :func:`parse_config` (round-trips every field)."""
    sch = cfg.schedule
    blocks = {
        "experiment": [f"arch = {cfg.arch}",
                       f"levels = {', '.join(map(str, cfg.levels)) if cfg.levels else ''}",
                       f"reset = {', '.join(cfg.reset)}", f"freeze = {cfg.freeze}",
                       f"head_spec = {cfg.head_spec}", f"seeds = {', '.join(map(str, cfg.seeds))}",
                       f"bn_recalibrate = {cfg.bn_recalibrate}", f"dtype = {cfg.dtype}"],
        "init": [f"kind = {cfg.init.kind}", f"gain = {cfg.init.gain!r}",
                 f"residual_scale = {cfg.init.residual_scale!r}"],
        "source": _task_lines(cfg.source),
        "target": _task_lines(cfg.target),
        "schedule": [f"mode = {sch.mode}",
                     f"rates = {', '.join(f'{k}:{v!r}' for k, v in sch.rates.items())}",
                     f"rounds = {sch.rounds}",
                     f"target_densities = {', '.join(repr(d) for d in sch.target_densities)}",
                     f"scope = {sch.scope}"],
        "source_hyper": _hyper_lines(cfg.source_hyper),
        "target_hyper": _hyper_lines(cfg.target_hyper),
    }
    return "\n".join(f"[{name}]\n" + "\n".join(lines) + "\n" for name, lines in blocks.items())
