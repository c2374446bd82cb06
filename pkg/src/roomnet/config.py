"""Training configuration and its ``key = value`` text format.

Blank lines and ``#`` comments are ignored.  Model keys (``input_size``,
``widths``, ``variant``, ...) and training keys share one flat namespace;
tuples are comma separated.  ``preset = desk`` or ``preset = full`` loads
a baseline that later keys override.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from roomnet.errors import ConfigError, InvalidArgumentError
from roomnet.model import ModelConfig


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    batch_size: int = 8
    lr: float = 0.0003
    milestones: tuple = (40, 50)
    lr_factor: float = 5.0
    epochs: int = 60
    momentum: float = 0.9
    weight_decay: float = 0.0005
    seed: int = 0
    train_data: str = ""
    val_data: str = ""
    checkpoint_dir: str = ""
    checkpoint_every: int = 10
    background_factor: float = 0.2
    flip_prob: float = 0.5
    flip_average: bool = False

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        self.validate()

    def validate(self) -> None:
        m = self.milestones
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if any(b <= a for a, b in zip(m, m[1:])):
            raise ConfigError(f"milestones must be strictly increasing, got {m}")
        if m and (m[0] < 1 or m[-1] >= self.epochs):
            raise ConfigError(f"milestones must lie in [1, epochs - 1], got {m} with epochs={self.epochs}")
        if self.lr <= 0 or self.lr_factor <= 0:
            raise ConfigError("lr and lr_factor must be positive")
        if not 0 <= self.flip_prob <= 1:
            raise ConfigError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        if not 0 <= self.background_factor <= 1:
            raise ConfigError(f"background_factor must lie in [0, 1], got {self.background_factor}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``: divided by ``lr_factor`` once per milestone reached."""
        drops = sum(1 for m in self.milestones if epoch >= m)
        return self.lr / self.lr_factor**drops

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "model"}
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)


# Desk scale runs on one CPU core; the full preset is the 320 px large-scale recipe.
PRESETS = {
    "desk": {},
    "full": dict(batch_size=20, lr=1e-5, milestones=(150, 200), epochs=225,
                 model=dict(input_size=320, widths=(64, 128, 256, 512, 512), convs_per_stage=2,
                            side_hidden=(1024, 512))),
}

_MODEL_FIELDS = {f.name: f for f in fields(ModelConfig)}
_TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig) if f.name != "model"}


def _convert(raw: str, default):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, tuple):
        return tuple(int(v) for v in raw.split(",") if v.strip())
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def _default(f: dataclasses.Field):
    return f.default_factory() if f.default is dataclasses.MISSING else f.default


def parse_config(text: str, source: str = "<config>", overrides: Optional[list] = None) -> TrainConfig:
    """Build a TrainConfig from ``key = value`` lines plus ``key=value`` overrides."""
    entries = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if line:
            entries.append((f"{source}:{lineno}", line))
    entries += [("<override>", o) for o in overrides or []]

    model_kw, train_kw = {}, {}
    for where, line in entries:
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        try:
            if key == "preset":
                if raw not in PRESETS:
                    raise ValueError(f"unknown preset {raw!r}; choose from {sorted(PRESETS)}")
                preset = dict(PRESETS[raw])
                model_kw.update(preset.pop("model", {}))
                train_kw.update(preset)
            elif key in _MODEL_FIELDS:
                model_kw[key] = _convert(raw, _default(_MODEL_FIELDS[key]))
            elif key in _TRAIN_FIELDS:
                train_kw[key] = _convert(raw, _default(_TRAIN_FIELDS[key]))
            else:
                raise ValueError(f"unknown key {key!r}")
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from None
    try:
        return TrainConfig(model=ModelConfig(**model_kw), **train_kw)
    except InvalidArgumentError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path, overrides: Optional[list] = None) -> TrainConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path), overrides)


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for name, value in list(cfg.model.to_dict().items()) + [(k, getattr(cfg, k)) for k in _TRAIN_FIELDS]:
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"
