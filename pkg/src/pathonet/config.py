"""Run configuration: one flat ``key = value`` document for every tunable.

Precedence, lowest to highest: built-in defaults, config file, environment
variables (``PATHONET_<KEY>``, e.g. ``PATHONET_RADIUS=8``), command-line flags.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping

from .labels import LabelRenderConfig
from .model import DEFAULT_WIDTHS, ArchDescriptor
from .postprocess import PostprocessConfig
from .tensor import LrSchedule

ENV_PREFIX = "PATHONET_"


class ConfigError(ValueError):
    """Malformed or unknown configuration entry."""


def split_csv(text: str, n: int | None = None, cast=float) -> tuple:
    parts = [p.strip() for p in str(text).split(",") if p.strip()]
    if n is not None and len(parts) != n:
        raise ValueError(f"expected {n} comma-separated values, got {text!r}")
    return tuple(cast(p) for p in parts)


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text: str) -> int | None:
    return None if str(text).strip().lower() in ("", "none") else int(text)


@dataclass(frozen=True)
class RunConfig:
    # model
    widths: tuple[int, ...] = DEFAULT_WIDTHS
    dilation: int = 4
    # labels
    variance: float = 9.0
    peak: float = 255.0
    center_value: float = 2250.0
    tile: int = 256
    train_fraction: float = 0.7
    # post-processing and evaluation
    thresholds: tuple[float, float, float] = (120.0, 180.0, 40.0)
    min_separation: int = 5
    seed_source: str = "distance"
    radius: float = 6.0
    # training
    base_lr: float = 1e-4
    decay_factor: float = 0.1
    decay_every: int = 10
    epochs: int = 30
    batch_size: int = 1
    augment: bool = True
    max_steps: int | None = None
    # runtime
    seed: int | None = None
    threads: int = 0  # 0: one per logical core

    def __post_init__(self):
        # build the derived configs once so invalid values fail early
        self.arch()
        self.render_config()
        self.postprocess_config()
        self.schedule()
        if self.radius <= 0:
            raise ConfigError("radius must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.tile < 8 or self.tile % 8:
            raise ConfigError("tile must be a positive multiple of 8")
        if not 0.0 <= self.train_fraction <= 1.0:
            raise ConfigError("train_fraction must lie in [0, 1]")
        if self.threads < 0:
            raise ConfigError("threads must be >= 0")

    def arch(self) -> ArchDescriptor:
        return ArchDescriptor(widths=self.widths, dilation=self.dilation)

    def render_config(self) -> LabelRenderConfig:
        return LabelRenderConfig(variance=self.variance, peak=self.peak, center_value=self.center_value)

    def postprocess_config(self) -> PostprocessConfig:
        return PostprocessConfig(self.thresholds, self.min_separation, self.seed_source)

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.base_lr, self.decay_factor, self.decay_every)

    def workers(self) -> int:
        return self.threads or os.cpu_count() or 1

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(f"{v:g}" if isinstance(v, float) else str(v) for v in value)
            elif value is None:
                value = "none"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


_PARSERS = {
    "widths": lambda s: split_csv(s, None, int),
    "thresholds": lambda s: split_csv(s, 3, float),
    "dilation": int, "tile": int, "min_separation": int, "decay_every": int,
    "epochs": int, "batch_size": int, "threads": int,
    "variance": float, "peak": float, "center_value": float, "train_fraction": float,
    "radius": float, "base_lr": float, "decay_factor": float,
    "seed_source": str, "augment": _bool,
    "max_steps": _opt_int, "seed": _opt_int,
}
KEYS = tuple(f.name for f in fields(RunConfig))
assert set(_PARSERS) == set(KEYS)


def parse_value(key: str, raw, origin: str = "value"):
    if key not in _PARSERS:
        raise ConfigError(f"{origin}: unknown key {key!r}")
    if not isinstance(raw, str):
        return raw
    try:
        return _PARSERS[key](raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{origin}: bad value for {key!r}: {exc}") from None


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    """``key = value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{origin}:{n}: duplicate key {key!r}")
        out[key] = parse_value(key, value, f"{origin}:{n}")
    return out


def env_overrides(environ: Mapping[str, str]) -> dict:
    out = {}
    for name, value in environ.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower()
            out[key] = parse_value(key, value, f"environment variable {name}")
    return out


def load_config(path: str | os.PathLike | None = None, environ: Mapping[str, str] | None = None,
                overrides: Mapping | None = None) -> RunConfig:
    """Merge defaults < file < environment < ``overrides`` (flags)."""
    values: dict = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(), str(path)))
    values.update(env_overrides(os.environ if environ is None else environ))
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = parse_value(key, value, f"--{key.replace('_', '-')}")
    try:
        return dataclasses.replace(RunConfig(), **values)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
