"""Run configuration: one JSON file plus ``section.key=value`` overrides.

A run file looks like::

    {
      "task": "caption",
      "train_data": ["data/caption_train"],
      "eval_data": "data/caption_test",
      "out_dir": "runs/caption",
      "model": {"hidden_dim": 128, "encoder_layers": 2, "decoder_layers": 2},
      "train": {"total_iters": 1000, "peak_lr_encoder": 3e-4},
      "decode": {"strategy": "beam", "beam": 4, "alpha": 0.6}
    }

Every section is checked by the dataclass that consumes it, so a bad value
is reported before any data is read or any weights are touched.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

from .decoding import DecodeParams
from .model import ModelConfig
from .training import TrainConfig

TASKS = ("caption", "vqa", "video", "classify", "scene-text")
_SECTIONS = ("model", "train", "decode", "loader")
_LOADER_KEYS = {"trunk_size", "shuffle_trunk_order"}
RUN_PEAK_LR = 3e-4


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass
class RunConfig:
    task: str = "caption"
    seed: int = 0
    out_dir: str = "runs/latest"
    train_data: list[str] = field(default_factory=list)
    eval_data: str | None = None
    checkpoint: str | None = None
    init_checkpoint: str | None = None
    labels_file: str | None = None
    char_level: bool | None = None       # defaults to True for scene-text
    with_captions: bool = False          # vqa: also train on each image's caption
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    decode: dict = field(default_factory=dict)
    loader: dict = field(default_factory=dict)

    # -- typed views -------------------------------------------------------

    @property
    def use_char_level(self) -> bool:
        return self.task == "scene-text" if self.char_level is None else bool(self.char_level)

    def train_config(self) -> TrainConfig:
        """Training settings; keys the file leaves out follow the short-run recipe.

        Unset ``peak_lr_encoder`` becomes 3e-4 and unset ``warmup_iters``
        becomes a tenth of the schedule, capped at the library default.
        """
        raw = {"seed": self.seed, "peak_lr_encoder": RUN_PEAK_LR, **self.train}
        if "warmup_iters" not in raw:
            total = int(raw.get("total_iters", TrainConfig.total_iters))
            raw["warmup_iters"] = min(TrainConfig.warmup_iters, total // 10)
        return TrainConfig.from_dict(raw)

    def decode_params(self) -> DecodeParams:
        return DecodeParams(**self.decode)

    def model_config(self, vocab_size: int, **defaults) -> ModelConfig:
        """Model settings from the file; ``defaults`` fill keys the file leaves out."""
        return ModelConfig(**{**defaults, **self.model, "vocab_size": vocab_size})

    def to_dict(self) -> dict:
        return asdict(self)

    # -- validation --------------------------------------------------------

    def validate(self, command: str | None = None) -> "RunConfig":
        """Re-run every constituent check; ``command`` adds path requirements."""
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        try:
            self.train_config()
            self.decode_params()
            ModelConfig(**{"vocab_size": 8, **self.model}).validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        unknown = set(self.loader) - _LOADER_KEYS
        if unknown:
            raise ConfigError(f"unknown loader keys {sorted(unknown)}")
        if int(self.loader.get("trunk_size", 64)) < 1:
            raise ConfigError("loader.trunk_size must be positive")
        if command == "train":
            if not self.train_data:
                raise ConfigError("train needs at least one train_data directory")
            for p in self.train_data:
                _require_dataset(p, "train_data")
            if self.init_checkpoint:
                _require_file(self.init_checkpoint, "init_checkpoint")
        if command in ("generate", "eval"):
            if not self.checkpoint:
                raise ConfigError(f"{command} needs a checkpoint")
            _require_file(self.checkpoint, "checkpoint")
        if command == "eval" and self.eval_data:
            _require_dataset(self.eval_data, "eval_data")
        if self.labels_file:
            _require_file(self.labels_file, "labels_file")
        return self


def _require_file(path, what: str) -> None:
    if not Path(path).is_file():
        raise ConfigError(f"{what} {path!r} does not exist")


def _require_dataset(path, what: str) -> None:
    if not (Path(path) / "manifest.json").is_file():
        raise ConfigError(f"{what} {path!r} is not a dataset directory (no manifest.json)")


def parse_value(text: str):
    """JSON when it parses (numbers, booleans, lists, null), else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(raw: dict, key: str, value) -> None:
    parts = key.split(".")
    if len(parts) == 1:
        if parts[0] in _SECTIONS:
            raise ConfigError(f"{key} is a section; set one of its keys as {key}.<name>")
        raw[parts[0]] = value
    elif len(parts) == 2 and parts[0] in _SECTIONS:
        raw.setdefault(parts[0], {})[parts[1]] = value
    else:
        raise ConfigError(f"cannot override {key!r}: use <key> or <section>.<key> with section in {_SECTIONS}")


def build_run_config(path=None, overrides: Sequence[str] = (), flags: dict | None = None) -> RunConfig:
    """File, then ``key=value`` overrides, then explicit flags (flags win)."""
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path!r} does not exist") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path!r} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        apply_override(raw, key.strip(), parse_value(value))
    for key, value in (flags or {}).items():
        if value is not None:
            apply_override(raw, key, value)
    names = {f.name for f in fields(RunConfig)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    for section in _SECTIONS:
        if not isinstance(raw.get(section, {}), dict):
            raise ConfigError(f"{section} must be an object")
    if isinstance(raw.get("train_data"), str):
        raw["train_data"] = [raw["train_data"]]
    return RunConfig(**raw)
