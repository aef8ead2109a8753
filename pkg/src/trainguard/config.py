"""Experiment configuration and its flat ``key = value`` file format."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping

from .controller import ControllerConfig
from .errors import ConfigError, TrainGuardError
from .faults import FaultSpec
from .model import MlpSpec
from .optimizers import OptimizerConfig

TASKS = ("blobs", "chars")
PROBE_SOURCES = ("heldout", "train")
DEFAULT_PHRASE = "a stable run recovers from a bad update by rolling back. "


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one paired baseline/controlled experiment.

    ``epsilon = None`` means "calibrate before running" (see
    ``experiment.calibrate_epsilon``); the effective config written next to
    results always carries the resolved value.
    """

    tag: str = "vision"
    task: str = "blobs"
    seed: int = 0
    total_steps: int = 250
    num_seeds: int = 20
    # model
    hidden: int = 32
    # blobs task
    pool_size: int = 2048
    blob_dim: int = 10
    blob_classes: int = 4
    blob_separation: float = 3.0
    # chars task
    phrase: str = DEFAULT_PHRASE
    window: int = 4
    repeats: int = 16
    # optimizer
    optimizer: str = "sgd_momentum"
    learning_rate: float = 0.5
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 128
    # controller
    probe_size: int = 16
    probe_source: str = "heldout"
    epsilon: float | None = None
    alpha: float = 0.1
    probe_interval: int = 1
    calibration_burnin: int = 50
    calibration_steps: int = 50
    calibration_factor: float = 6.0
    # fault window
    fault_enabled: bool = True
    fault_onset: int = 120
    fault_duration: int = 10
    fault_zeta: float = 300.0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.probe_source not in PROBE_SOURCES:
            raise ConfigError(f"probe_source must be one of {PROBE_SOURCES}")
        for name in ("total_steps", "num_seeds", "hidden", "batch_size", "probe_size", "calibration_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.calibration_burnin < 0:
            raise ConfigError("calibration_burnin must be >= 0")
        if self.fault_enabled and self.total_steps < self.fault_onset + self.fault_duration:
            raise ConfigError("total_steps must cover the whole fault window")
        if "/" in self.tag or not self.tag:
            raise ConfigError("tag must be a nonempty name without '/'")
        try:
            self.optimizer_config()
            self.fault_spec()
            # a stand-in threshold lets the other controller fields be checked
            # before calibration has run
            self.controller_config(1.0 if self.epsilon is None else None)
        except TrainGuardError as exc:
            raise ConfigError(str(exc)) from exc

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(kind=self.optimizer, learning_rate=self.learning_rate,
                               momentum=self.momentum, beta1=self.beta1, beta2=self.beta2,
                               eps=self.adam_eps, weight_decay=self.weight_decay)

    def controller_config(self, epsilon: float | None = None) -> ControllerConfig:
        eps = self.epsilon if epsilon is None else epsilon
        if eps is None:
            raise ConfigError("epsilon is not resolved; calibrate first")
        return ControllerConfig(epsilon=eps, alpha=self.alpha, probe_interval=self.probe_interval)

    def fault_spec(self) -> FaultSpec | None:
        if not self.fault_enabled:
            return None
        return FaultSpec(self.fault_onset, self.fault_duration, self.fault_zeta)

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def to_mapping(self) -> dict[str, object]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def vision_config(**overrides) -> ExperimentConfig:
    """Blob classification standing in for the image task (batch 128)."""
    return ExperimentConfig(**overrides)


def sequence_config(**overrides) -> ExperimentConfig:
    """Windowed next-character prediction standing in for the text task (batch 64)."""
    base = dict(tag="sequence", task="chars", hidden=64, batch_size=64, learning_rate=1.0)
    base.update(overrides)
    return ExperimentConfig(**base)


PRESETS = {"blobs": vision_config, "chars": sequence_config}


def _field_types() -> dict[str, str]:
    return {f.name: f.type for f in fields(ExperimentConfig)}


def _parse_value(key: str, text: str, type_name: str):
    text = text.strip()
    try:
        if type_name == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if type_name == "int":
            return int(text)
        if type_name == "float":
            return float(text)
        if type_name == "float | None":
            return None if text.lower() in ("auto", "none", "") else float(text)
        if type_name == "str":
            return _unquote(text)
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {text!r}") from None
    raise ConfigError(f"unsupported field type {type_name} for {key}")


def _unquote(text: str) -> str:
    if len(text) >= 2 and text[0] == text[-1] == '"':
        return text[1:-1].encode("latin-1", "backslashreplace").decode("unicode_escape")
    return text


def _format_value(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value) if math.isfinite(value) else str(value)
    if isinstance(value, str):
        # quote strings so leading/trailing spaces and '#' survive the round trip
        escaped = value.encode("unicode_escape").decode("ascii").replace('"', '\\x22')
        return f'"{escaped}"'
    return str(value)


def parse_lines(lines) -> dict[str, str]:
    """Collect raw ``key = value`` pairs; ``#`` starts a comment outside quotes."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(lines, 1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw.strip()!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _strip_comment(line: str) -> str:
    quoted = False
    for i, ch in enumerate(line):
        if ch == '"':
            quoted = not quoted
        elif ch == "#" and not quoted:
            return line[:i]
    return line


def config_from_mapping(raw: Mapping[str, str]) -> ExperimentConfig:
    """Build a config from string values. The ``task`` key picks the preset
    that unspecified keys default to."""
    types = _field_types()
    unknown = sorted(set(raw) - set(types))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    values = {k: _parse_value(k, v, types[k]) for k, v in raw.items()}
    task = values.get("task", "blobs")
    if task not in PRESETS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
    try:
        return PRESETS[task](**values)
    except TrainGuardError as exc:
        raise ConfigError(str(exc)) from exc


def parse_overrides(pairs) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override must look like key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path: str | Path | None, overrides: Mapping[str, str] | None = None) -> ExperimentConfig:
    raw: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        raw.update(parse_lines(p.read_text().splitlines()))
    raw.update(overrides or {})
    return config_from_mapping(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in cfg.to_mapping().items())
