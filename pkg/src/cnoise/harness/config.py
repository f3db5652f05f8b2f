"""Experiment configuration and its flat ``key = value`` text format.

One assignment per line, dotted keys name the section, ``#`` starts a
comment.  Values are Python literals (numbers, strings, tuples, lists,
dicts, ``None``, ``True``/``False``); a bare word that is not a literal is
read as a string, so ``model.kind = circle`` works.  Unknown keys are an
error.  See ``docs/config.md`` for the full schema.
"""

from __future__ import annotations

import ast
import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..cno import CnoConfig
from ..diffusion import (
    GaussianMixtureModel,
    NoiseSchedule,
    build_schedule,
    circle_mixture,
    grid_mixture,
)
from ..errors import ParameterError

__all__ = [
    "ModelSpec",
    "ScheduleSpec",
    "ExperimentConfig",
    "parse_config",
    "load_config",
    "format_config",
]

MAX_SEED = 2**64 - 1


@dataclass(frozen=True)
class ModelSpec:
    """Which toy mixture to build and which condition to sample under.

    ``kind`` is ``circle`` (modes on a ring), ``grid`` (random modes in a
    ``(C, S, S)`` latent) or ``explicit`` (means/scales/weights given).
    """

    kind: str = "circle"
    condition: str | None = "all"
    guidance: float = 6.0
    n_modes: int = 8
    radius: float = 5.0
    scale: float = 0.1
    shape: tuple[int, int, int] = (4, 32, 32)
    mode_scale: float = 1.0
    seed: int = 0
    means: tuple | None = None
    scales: tuple | None = None
    weights: tuple | None = None
    conditions: dict | None = None

    def build(self) -> GaussianMixtureModel:
        if self.kind == "circle":
            return circle_mixture(self.n_modes, self.radius, self.scale, self.guidance, self.conditions)
        if self.kind == "grid":
            return grid_mixture(
                tuple(self.shape), self.n_modes, self.mode_scale, self.scale, self.seed, self.guidance
            )
        if self.kind == "explicit":
            if self.means is None or self.scales is None or self.weights is None:
                raise ParameterError("explicit model needs model.means, model.scales and model.weights")
            return GaussianMixtureModel(
                means=self.means,
                scales=self.scales,
                weights=self.weights,
                conditions=self.conditions or {},
                guidance_scale=self.guidance,
            )
        raise ParameterError(f"unknown model.kind {self.kind!r}")

    @property
    def latent_shape(self):
        return tuple(self.shape) if self.kind == "grid" else None


@dataclass(frozen=True)
class ScheduleSpec:
    # scaled-linear 0.00085..0.012 is the schedule latent text-to-image models ship with
    T: int = 1000
    beta_start: float = 0.00085
    beta_end: float = 0.012
    kind: str = "scaled_linear"
    steps: int = 50

    def build(self) -> NoiseSchedule:
        if int(self.steps) != self.steps or not 1 <= self.steps <= self.T:
            raise ParameterError("schedule.steps must be an integer in [1, T]")
        return build_schedule(self.T, self.beta_start, self.beta_end, self.kind)


def _default_cno():
    return CnoConfig(batch_size=8, window=None)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "run"
    model: ModelSpec = field(default_factory=ModelSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    cno: CnoConfig = field(default_factory=_default_cno)
    kernel: str = "cosine"
    trials: int = 200
    seed: int = 0
    out_dir: str = "out"
    emit_plots: bool = False
    timing: bool = False

    def __post_init__(self):
        if int(self.trials) != self.trials or self.trials < 0:
            raise ParameterError("run.trials must be a non-negative integer")
        if int(self.seed) != self.seed or not 0 <= self.seed <= MAX_SEED:
            raise ParameterError("run.seed must be an unsigned 64-bit integer")
        if self.kernel not in ("cosine", "rbf"):
            raise ParameterError(f"unknown metrics.kernel {self.kernel!r}")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def with_cno(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, cno=dataclasses.replace(self.cno, **changes))

    def config_hash(self) -> str:
        """SHA-256 of the canonical text form; any field change changes it."""
        return hashlib.sha256(format_config(self).encode()).hexdigest()


# key in the text format -> (section attribute or None, field name)
_KEYS = {"run.name": (None, "name"), "run.trials": (None, "trials"), "run.seed": (None, "seed"),
         "metrics.kernel": (None, "kernel"), "output.dir": (None, "out_dir"),
         "output.plots": (None, "emit_plots"), "output.timing": (None, "timing")}
for _f in dataclasses.fields(ModelSpec):
    _KEYS[f"model.{_f.name}"] = ("model", _f.name)
for _f in dataclasses.fields(ScheduleSpec):
    _KEYS[f"schedule.{_f.name}"] = ("schedule", _f.name)
for _f in dataclasses.fields(CnoConfig):
    _KEYS[f"cno.{_f.name}"] = ("cno", _f.name)


def _strip_comment(line: str) -> str:
    quote = None
    for i, ch in enumerate(line):
        if quote:
            if ch == quote:
                quote = None
        elif ch in "'\"":
            quote = ch
        elif ch == "#":
            return line[:i]
    return line


def _literal(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _coerce(key, value):
    # "full" is accepted as a spelling of the unpooled window
    if key == "cno.window" and value == "full":
        return None
    if key in ("model.means", "model.scales", "model.weights", "model.shape") and value is not None:
        return tuple(map(tuple, value)) if key == "model.means" else tuple(value)
    return value


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse the text format on top of ``base`` (defaults if omitted)."""
    base = base or ExperimentConfig()
    top, sections = {}, {"model": {}, "schedule": {}, "cno": {}}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS:
            raise ParameterError(f"line {lineno}: unknown key {key!r}")
        section, name = _KEYS[key]
        value = _coerce(key, _literal(value))
        (top if section is None else sections[section])[name] = value
    try:
        return dataclasses.replace(
            base,
            model=dataclasses.replace(base.model, **sections["model"]),
            schedule=dataclasses.replace(base.schedule, **sections["schedule"]),
            cno=dataclasses.replace(base.cno, **sections["cno"]),
            **top,
        )
    except TypeError as exc:
        raise ParameterError(f"bad config value: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParameterError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text)


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return repr(value)


def format_config(config: ExperimentConfig) -> str:
    """Canonical text form; ``parse_config(format_config(c)) == c``."""
    lines = []
    for key, (section, name) in _KEYS.items():
        owner = config if section is None else getattr(config, section)
        lines.append(f"{key} = {_fmt(getattr(owner, name))}")
    return "\n".join(lines) + "\n"
