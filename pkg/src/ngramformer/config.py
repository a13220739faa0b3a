"""Experiment configuration files.

A config is a JSON document with four top-level keys::

    {
      "model":    {... ModelConfig fields, layer lists as objects ...},
      "task":     {... SyntheticTask fields ...},
      "training": {... TrainConfig fields ...},
      "output_dir": "runs/copy_ngram"
    }

Missing keys take their defaults; unknown keys are rejected with the dotted
path of the offending entry (``model.decoder_layers[1].use_global``).
"""

from __future__ import annotations

import json
import types
import typing
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

from .errors import ConfigError
from .layers import LayerSpec
from .model import ModelConfig
from .training import SyntheticTask, TrainConfig


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: SyntheticTask = field(default_factory=SyntheticTask)
    training: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs/experiment"

    def to_dict(self) -> dict:
        return {
            "model": asdict(self.model),
            "task": asdict(self.task),
            "training": asdict(self.training),
            "output_dir": self.output_dir,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _check_value(value, hint, path: str):
    origin = typing.get_origin(hint)
    if origin is typing.Union or origin is types.UnionType:
        args = typing.get_args(hint)
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _check_value(value, inner[0], path)
    if origin is list:
        (item,) = typing.get_args(hint)
        if not isinstance(value, list):
            raise ConfigError(f"expected a list, got {type(value).__name__}", path)
        return [_check_value(v, item, f"{path}[{i}]") for i, v in enumerate(value)]
    if hint is LayerSpec:
        return _parse_dataclass(LayerSpec, value, path)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", path)
        return value
    if hint is int:
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"expected an integer, got {value!r}", path)
        return value
    if hint is float:
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"expected a number, got {value!r}", path)
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path)
        return value
    raise ConfigError(f"unsupported field type {hint!r}", path)  # pragma: no cover


def _parse_dataclass(cls, raw, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"expected an object, got {type(raw).__name__}", path)
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError("unknown key", f"{path}.{key}")
    kwargs = {k: _check_value(v, hints[k], f"{path}.{k}") for k, v in raw.items()}
    try:
        obj = cls(**kwargs)
        if hasattr(obj, "validate"):
            obj.validate()
    except ConfigError as exc:
        raise ConfigError(exc.message, f"{path}.{exc.key}" if exc.key else path) from None
    return obj


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("top level must be an object")
    for key in raw:
        if key not in ("model", "task", "training", "output_dir"):
            raise ConfigError("unknown key", key)
    model = _parse_dataclass(ModelConfig, raw.get("model", {}), "model")
    task = _parse_dataclass(SyntheticTask, raw.get("task", {}), "task")
    training = _parse_dataclass(TrainConfig, raw.get("training", {}), "training")
    output_dir = _check_value(raw.get("output_dir", "runs/experiment"), str, "output_dir")
    if task.vocab_size > model.vocab_size:
        raise ConfigError(f"task vocabulary {task.vocab_size} exceeds model vocabulary {model.vocab_size}", "task.vocab_size")
    if task.max_len + 1 > model.max_len:
        raise ConfigError(f"targets need {task.max_len + 1} positions but model.max_len is {model.max_len}", "model.max_len")
    return ExperimentConfig(model, task, training, output_dir)


def loads(text: str) -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"not valid JSON: {exc}") from None
    return parse_config(raw)


def bundled_configs() -> list[str]:
    root = resources.files("ngramformer") / "configs"
    return sorted(p.name for p in root.iterdir() if p.name.endswith(".cfg"))


def resolve_path(path) -> Path:
    """Return ``path`` if it exists, else the bundled config of that name."""
    p = Path(path)
    if p.exists():
        return p
    bundled = resources.files("ngramformer") / "configs" / p.name
    if bundled.is_file():
        return Path(str(bundled))
    raise ConfigError(f"config file not found: {path}")


def load_config(path) -> ExperimentConfig:
    return loads(resolve_path(path).read_text())


def save_config(path, config: ExperimentConfig) -> None:
    Path(path).write_text(config.dumps())
