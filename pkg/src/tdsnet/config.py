"""Flat ``key = value`` configuration shared by the model, trainer and data generator."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .data import DatasetSpec
from .network import MODEL_PRESETS, ConfigError, ModelConfig
from .train import TRAIN_PRESETS, TrainConfig


@dataclass
class DataConfig:
    """Dataset knobs; frame geometry comes from the model config."""

    velocities: tuple = (2, -2, 6, -6)
    static_class: bool = False
    clips_per_class: int = 64
    val_per_class: int = 16
    t_raw: int = 16
    sprite: int = 8
    data_seed: int = 0

    def spec(self, model_cfg):
        return DatasetSpec(
            velocities=tuple(self.velocities), static_class=self.static_class,
            clips_per_class=self.clips_per_class, val_per_class=self.val_per_class,
            t_raw=self.t_raw, height=model_cfg.height, width=model_cfg.width,
            sprite=self.sprite, seed=self.data_seed,
        )


SECTIONS = (("model", ModelConfig), ("train", TrainConfig), ("data", DataConfig))
FIELD_OWNER = {f.name: sec for sec, cls in SECTIONS for f in dataclasses.fields(cls)}
_TUPLE_FIELDS = {"td_layer_mask": bool, "velocities": int}


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: DataConfig

    @classmethod
    def preset(cls, name):
        if name not in MODEL_PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(MODEL_PRESETS)}")
        return cls(MODEL_PRESETS[name], TRAIN_PRESETS[name], DataConfig())

    def update(self, values):
        """Apply ``{field: value}`` (already typed); unknown keys are rejected."""
        parts = {sec: {} for sec, _ in SECTIONS}
        for key, val in values.items():
            if key not in FIELD_OWNER:
                raise ConfigError(f"unknown config key {key!r}")
            parts[FIELD_OWNER[key]][key] = val
        return RunConfig(
            dataclasses.replace(self.model, **parts["model"]),
            dataclasses.replace(self.train, **parts["train"]),
            dataclasses.replace(self.data, **parts["data"]),
        )

    def validate(self):
        self.model.validate()
        self.train.validate()
        spec = self.data.spec(self.model)
        try:
            spec.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if spec.num_classes > self.model.num_classes:
            raise ConfigError(f"dataset has {spec.num_classes} classes, model only {self.model.num_classes}")
        if self.data.t_raw < self.model.frames:
            raise ConfigError(f"t_raw {self.data.t_raw} < sampled frames {self.model.frames}")
        return self

    def items(self):
        for sec, _ in SECTIONS:
            obj = getattr(self, sec)
            for f in dataclasses.fields(obj):
                yield f.name, getattr(obj, f.name)

    def to_text(self):
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.items())


def field_type(name):
    owner = dict(SECTIONS)[FIELD_OWNER[name]]
    default = next(f for f in dataclasses.fields(owner) if f.name == name).default
    return type(default)


def parse_value(name, text):
    if name not in FIELD_OWNER:
        raise ConfigError(f"unknown config key {name!r}")
    text = text.strip()
    try:
        if name in _TUPLE_FIELDS:
            if text.lower() in ("", "none", "all"):
                return None if name == "td_layer_mask" else ()
            items = [s for s in text.replace(",", " ").split()]
            if name == "td_layer_mask" and len(items) == 1 and set(items[0]) <= {"0", "1"}:
                items = list(items[0])
            conv = _parse_bool if _TUPLE_FIELDS[name] is bool else int
            return tuple(conv(s) for s in items)
        kind = field_type(name)
        if kind is bool:
            return _parse_bool(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {text!r} ({exc})") from None


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def format_value(v):
    if v is None:
        return "all"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        if v and isinstance(v[0], bool):
            return "".join("1" if x else "0" for x in v)
        return ",".join(str(x) for x in v)
    return str(v)


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in FIELD_OWNER:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = parse_value(key, val)
    return values


def write_config_file(path, run_cfg):
    Path(path).write_text(run_cfg.to_text(), encoding="utf-8")
