"""Line-oriented ``key = value`` experiment configs with ``[task.<name>]`` sections.

Example::

    seed = 42
    fl_rounds = 60

    [task.spots]
    generator = blob
    n = 2000

Lines starting with ``#`` or ``;`` are comments. Every schema error reports the
offending line number.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .datasets import TASK_KINDS
from .errors import ConfigError
from .federation import TRANSPORTS, WEIGHTINGS
from .optim import SCHEDULES

_SECTION = re.compile(r"^\[task\.([A-Za-z0-9_\-]+)\]$")


def _int(v: str) -> int:
    return int(v)


def _nonneg_int(v: str) -> int:
    x = int(v)
    if x < 0:
        raise ValueError("must be >= 0")
    return x


def _pos_int(v: str) -> int:
    x = int(v)
    if x < 1:
        raise ValueError("must be >= 1")
    return x


def _nonneg_float(v: str) -> float:
    x = float(v)
    if not x >= 0:
        raise ValueError("must be >= 0")
    return x


def _fraction(v: str) -> float:
    x = float(v)
    if not 0 < x < 1:
        raise ValueError("must lie strictly between 0 and 1")
    return x


def _choice(options):
    def conv(v: str) -> str:
        if v not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return v
    return conv


def _int_list(v: str) -> tuple[int, ...]:
    items = tuple(int(x) for x in v.split(","))
    if any(x < 1 for x in items):
        raise ValueError("entries must be >= 1")
    return items


def _odd(v: str) -> int:
    x = _pos_int(v)
    if x % 2 == 0:
        raise ValueError("must be odd")
    return x


def _str(v: str) -> str:
    if not v:
        raise ValueError("must not be empty")
    return v


@dataclass(frozen=True)
class TaskConfig:
    name: str
    generator: str | None = None
    images: str | None = None
    labels: str | None = None
    n: int = 2000
    hw: int = 16
    positive_rate: float = 0.3
    noise_sigma: float = 0.3
    amplitude: float = 0.5
    seed: int | None = None
    line: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    tasks: tuple[TaskConfig, ...] = ()
    baseline_epochs: int = 300
    fl_rounds: int = 300
    epochs_per_round: int = 1
    initial_lr: float = 1e-3
    lr_schedule: str = "cosine-to-floor"
    lr_floor: float = 1e-5
    batch_size: int = 32
    aggregation_weighting: str = "samples"
    bootstrap_replicates: int = 1000
    transport: str = "in-process"
    threads: int = 1
    validation_fraction: float = 0.2
    output_dir: str = "runs/experiment"
    conv_channels: tuple[int, ...] = (8, 16, 32)
    kernel_size: int = 3
    dense_width: int = 64
    gradcam_samples: int = 4
    source: str = field(default="<string>", compare=False)

    def override(self, **kwargs) -> "ExperimentConfig":
        return replace(self, **{k: v for k, v in kwargs.items() if v is not None})


GLOBAL_KEYS = {
    "seed": _int,
    "baseline_epochs": _nonneg_int,
    "fl_rounds": _nonneg_int,
    "epochs_per_round": _nonneg_int,
    "initial_lr": _nonneg_float,
    "lr_schedule": _choice(SCHEDULES),
    "lr_floor": _nonneg_float,
    "batch_size": _pos_int,
    "aggregation_weighting": _choice(WEIGHTINGS),
    "bootstrap_replicates": _pos_int,
    "transport": _choice(TRANSPORTS),
    "threads": _pos_int,
    "validation_fraction": _fraction,
    "output_dir": _str,
    "conv_channels": _int_list,
    "kernel_size": _odd,
    "dense_width": _pos_int,
    "gradcam_samples": _nonneg_int,
}

TASK_KEYS = {
    "generator": _choice(TASK_KINDS),
    "images": _str,
    "labels": _str,
    "n": _pos_int,
    "hw": _pos_int,
    "positive_rate": _fraction,
    "noise_sigma": _nonneg_float,
    "amplitude": _nonneg_float,
    "seed": _int,
}


def parse_config(text: str, source: str = "<string>", base_dir: Path | None = None) -> ExperimentConfig:
    glob: dict = {}
    glob_lines: dict[str, int] = {}
    tasks: list[tuple[str, int, dict, dict]] = []
    current: tuple[str, int, dict, dict] | None = None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("["):
            m = _SECTION.match(line)
            if not m:
                raise ConfigError(f"bad section header {line!r}; expected [task.<name>]", lineno)
            name = m.group(1)
            if any(t[0] == name for t in tasks):
                raise ConfigError(f"duplicate task section {name!r}", lineno)
            current = (name, lineno, {}, {})
            tasks.append(current)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        schema, values, lines = ((TASK_KEYS, current[2], current[3]) if current
                                 else (GLOBAL_KEYS, glob, glob_lines))
        where = f"task {current[0]}" if current else "top level"
        if key not in schema:
            raise ConfigError(f"unknown key {key!r} at {where}", lineno)
        if key in values:
            raise ConfigError(f"duplicate key {key!r} (first set on line {lines[key]})", lineno)
        try:
            values[key] = schema[key](value)
        except ValueError as exc:
            raise ConfigError(f"{key} = {value!r}: {exc}", lineno) from None
        lines[key] = lineno

    if not tasks:
        raise ConfigError(f"{source}: no [task.<name>] sections", None)

    task_cfgs = []
    for name, header_line, values, lines in tasks:
        has_gen = "generator" in values
        has_files = "images" in values or "labels" in values
        if has_gen == has_files:
            raise ConfigError(f"task {name}: set either 'generator' or both 'images' and 'labels'",
                              header_line)
        if has_files and not ("images" in values and "labels" in values):
            raise ConfigError(f"task {name}: 'images' and 'labels' must both be given", header_line)
        if has_files and base_dir is not None:
            for key in ("images", "labels"):
                p = Path(values[key])
                values[key] = str(p if p.is_absolute() else base_dir / p)
        hw = values.get("hw", 16)
        if has_gen and hw % 8:
            raise ConfigError(f"task {name}: hw must be divisible by 8", lines.get("hw", header_line))
        task_cfgs.append(TaskConfig(name=name, line=header_line, **values))

    hws = {t.hw for t in task_cfgs if t.generator}
    if len(hws) > 1:
        raise ConfigError(f"generated tasks disagree on hw: {sorted(hws)}",
                          max(t.line for t in task_cfgs))
    if "conv_channels" in glob and len(glob["conv_channels"]) != 3:
        raise ConfigError("conv_channels must list exactly 3 values", glob_lines["conv_channels"])
    if glob.get("lr_floor", 1e-5) > glob.get("initial_lr", 1e-3):
        raise ConfigError("lr_floor exceeds initial_lr", glob_lines.get("lr_floor", glob_lines.get("initial_lr")))
    return ExperimentConfig(tasks=tuple(task_cfgs), source=source, **glob)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text, str(path), base_dir=path.parent)


def dump_config(cfg: ExperimentConfig) -> str:
    """Render a config back to text (inverse of ``parse_config`` up to formatting)."""
    lines = []
    for f in fields(cfg):
        if f.name in ("tasks", "source"):
            continue
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {', '.join(map(str, v)) if isinstance(v, tuple) else v}")
    for t in cfg.tasks:
        lines += ["", f"[task.{t.name}]"]
        for f in fields(t):
            v = getattr(t, f.name)
            if f.name in ("name", "line") or v is None:
                continue
            lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
