"""Experiment configuration: strict JSON load/save and dotted overrides.

The file mirrors the config dataclasses section by section::

    {
      "master_seed": 7,
      "private_per_client": 400,
      "test_per_class": 100,
      "out_dir": "out",
      "fl": {"setting": "cross_silo", "rounds": 20, ...},
      "generator": {"modality": "grid", "num_classes": 4, ...},
      "trigger": {"kind": "patch", "size": 3, "value": 1.0, "anchor": "bottom_right"},
      "poison": {"target_class": 0, "ratio": 0.2, "label_mode": "mislabel_to_target"},
      "sweep": null
    }

Unknown keys are rejected; every invariant violation reports the offending
section and field.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .attacks import PatchTrigger, PoisonConfig, TriggerSpec, trigger_from_dict, trigger_to_dict
from .datagen import GeneratorConfig
from .errors import ConfigError, InvalidInputError
from .federation import FLConfig

SWEEP_PARAMETERS = ("poison_ratio", "utilization_ratio")


@dataclass(frozen=True)
class SweepSpec:
    parameter: str
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.parameter not in SWEEP_PARAMETERS:
            raise InvalidInputError(
                f"parameter must be one of {SWEEP_PARAMETERS}, got {self.parameter!r}"
            )
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if not self.values:
            raise InvalidInputError("values must be non-empty")
        low = 0.0 if self.parameter == "poison_ratio" else 1e-12
        for v in self.values:
            if not low <= v <= 1.0:
                raise InvalidInputError(f"values entry {v} outside the valid range for {self.parameter}")


@dataclass(frozen=True)
class ExperimentConfig:
    fl: FLConfig = FLConfig()
    generator: GeneratorConfig = GeneratorConfig()
    trigger: TriggerSpec = PatchTrigger()
    poison: PoisonConfig = PoisonConfig()
    sweep: SweepSpec | None = None
    master_seed: int = 7
    private_per_client: int = 400
    test_per_class: int = 100
    out_dir: str = "out"

    def __post_init__(self) -> None:
        if self.private_per_client < 1:
            raise InvalidInputError("private_per_client must be positive")
        if self.test_per_class < 1:
            raise InvalidInputError("test_per_class must be positive")
        if self.poison.target_class >= self.generator.num_classes:
            raise InvalidInputError(
                f"target_class {self.poison.target_class} out of range for "
                f"num_classes {self.generator.num_classes}"
            )

    def to_dict(self) -> dict:
        return {
            "master_seed": self.master_seed,
            "private_per_client": self.private_per_client,
            "test_per_class": self.test_per_class,
            "out_dir": self.out_dir,
            "fl": dataclasses.asdict(self.fl),
            "generator": dataclasses.asdict(self.generator),
            "trigger": trigger_to_dict(self.trigger),
            "poison": dataclasses.asdict(self.poison),
            "sweep": None if self.sweep is None else {
                "parameter": self.sweep.parameter,
                "values": list(self.sweep.values),
            },
        }


def _build_section(cls, payload: dict, section: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"{section}: expected an object")
    allowed = {f.name for f in dataclasses.fields(cls)}
    for key in payload:
        if key not in allowed:
            raise ConfigError(f"unknown key {section}.{key}")
    coerced = dict(payload)
    for f in dataclasses.fields(cls):
        if f.name in coerced and isinstance(coerced[f.name], list):
            coerced[f.name] = tuple(coerced[f.name])
    try:
        return cls(**coerced)
    except InvalidInputError as exc:
        raise ConfigError(f"{section}: {exc}") from exc


_TOP_KEYS = {
    "master_seed",
    "private_per_client",
    "test_per_class",
    "out_dir",
    "fl",
    "generator",
    "trigger",
    "poison",
    "sweep",
}


def config_from_dict(payload: dict) -> ExperimentConfig:
    if not isinstance(payload, dict):
        raise ConfigError("config root must be an object")
    for key in payload:
        if key not in _TOP_KEYS:
            raise ConfigError(f"unknown key {key}")
    fl = _build_section(FLConfig, payload.get("fl", {}), "fl")
    generator = _build_section(GeneratorConfig, payload.get("generator", {}), "generator")
    poison = _build_section(PoisonConfig, payload.get("poison", {}), "poison")
    trigger_payload = payload.get("trigger")
    try:
        trigger = trigger_from_dict(trigger_payload) if trigger_payload else PatchTrigger()
    except (InvalidInputError, TypeError) as exc:
        raise ConfigError(f"trigger: {exc}") from exc
    sweep_payload = payload.get("sweep")
    sweep = None
    if sweep_payload is not None:
        sweep = _build_section(SweepSpec, sweep_payload, "sweep")
    try:
        return ExperimentConfig(
            fl=fl,
            generator=generator,
            trigger=trigger,
            poison=poison,
            sweep=sweep,
            master_seed=int(payload.get("master_seed", 7)),
            private_per_client=int(payload.get("private_per_client", 400)),
            test_per_class=int(payload.get("test_per_class", 100)),
            out_dir=str(payload.get("out_dir", "out")),
        )
    except InvalidInputError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse and strictly validate a config file. Missing file raises OSError."""
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
    return config_from_dict(payload)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def parse_override(text: str) -> tuple[list[str], object]:
    """Split ``section.field=value``; the value parses as JSON, else a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    keys = [k for k in key.strip().split(".") if k]
    if not keys:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return keys, value


def apply_overrides(payload: dict, overrides: list[str]) -> dict:
    """Apply dotted overrides to a config dict (re-validated afterwards)."""
    out = json.loads(json.dumps(payload))
    for text in overrides:
        keys, value = parse_override(text)
        node = out
        for key in keys[:-1]:
            if key not in node or not isinstance(node[key], dict):
                node[key] = {}
            node = node[key]
        node[keys[-1]] = value
    return out
