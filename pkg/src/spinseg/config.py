"""Training configuration, piecewise-constant schedules and key=value files."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .model import ModelConfig

Schedule = tuple[tuple[int, float], ...]

FULL_LR_SCHEDULE: Schedule = ((0, 3e-4), (400, 1e-4), (1400, 5e-5))
FULL_AUG_SCHEDULE: Schedule = ((0, 1.0), (1400, 0.5))
FULL_EPOCHS = 1600


class ConfigError(ValueError):
    """Malformed configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def check_schedule(schedule, name: str = "schedule") -> Schedule:
    sched = tuple((int(e), float(v)) for e, v in schedule)
    if not sched:
        raise ValueError(f"{name} is empty")
    if sched[0][0] != 0:
        raise ValueError(f"{name} must start at epoch 0, got {sched[0][0]}")
    for (e0, _), (e1, _) in zip(sched, sched[1:]):
        if e1 <= e0:
            raise ValueError(f"{name} epochs must be strictly increasing ({e0} then {e1})")
    return sched


def lr_at(schedule, epoch: int) -> float:
    """Value of the last entry whose start epoch is <= ``epoch``."""
    if not schedule:
        raise ValueError("empty schedule")
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    value = None
    for start, v in schedule:
        if start <= epoch:
            value = v
        else:
            break
    if value is None:
        raise ValueError(f"schedule has no entry at or before epoch {epoch}")
    return value


value_at = lr_at


def scaled_schedules(epochs: int, lr0: float = 3e-4) -> tuple[Schedule, Schedule]:
    """Learning-rate and augmentation schedules with the long-run shape: LR drops
    to lr0/3 at 25% and lr0/6 at 87.5% of training, augmentation probability
    drops from 1 to 0.5 at 87.5%. ``epochs=1600, lr0=3e-4`` gives the long-run
    values exactly."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    a = max(1, round(0.25 * epochs))
    b = max(a + 1, round(0.875 * epochs))
    lr = [(0, lr0)]
    if a < epochs:
        lr.append((a, lr0 / 3.0))
    if b < epochs:
        lr.append((b, lr0 / 6.0))
    aug = [(0, 1.0)] + ([(b, 0.5)] if b < epochs else [])
    return tuple(lr), tuple(aug)


def _default_lr():
    return scaled_schedules(60)[0]


def _default_aug():
    return scaled_schedules(60)[1]


@dataclass
class TrainConfig:
    epochs: int = 60
    lr_schedule: Schedule = field(default_factory=_default_lr)
    aug_prob_schedule: Schedule = field(default_factory=_default_aug)
    batch_size: int = 8
    steps_per_epoch: int = 0  # 0: ceil(training windows / batch_size)
    max_steps: int = 0  # 0: no cap
    seed: int = 0
    loss: str = "bce"
    lesion_probability: float = 0.95
    checkpoint_every: int = 0
    # model variant
    input_slices: int = 5
    encoder_channels: tuple[int, ...] = (32, 64, 128, 256)
    decoder_width: int = 16
    guidance_mode: str = "spg"
    downsampler_mode: str = "learnable"

    def __post_init__(self):
        self.lr_schedule = check_schedule(self.lr_schedule, "lr_schedule")
        self.aug_prob_schedule = check_schedule(self.aug_prob_schedule, "aug_prob_schedule")
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        # lr == 0 is accepted and means "parameters frozen"
        if any(v < 0 or not math.isfinite(v) for _, v in self.lr_schedule):
            raise ConfigError("lr_schedule", "learning rates must be finite and >= 0")
        if any(not 0 <= v <= 1 for _, v in self.aug_prob_schedule):
            raise ConfigError("aug_prob_schedule", "probabilities must lie in [0, 1]")
        if self.epochs < 1:
            raise ConfigError("epochs", "must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.steps_per_epoch < 0 or self.max_steps < 0 or self.checkpoint_every < 0:
            raise ConfigError("steps_per_epoch", "counts must be >= 0")
        if self.loss not in ("bce", "soft_dice"):
            raise ConfigError("loss", f"must be bce or soft_dice, got {self.loss!r}")
        if not 0 <= self.lesion_probability <= 1:
            raise ConfigError("lesion_probability", "must lie in [0, 1]")
        try:
            self.model_config()
        except ValueError as exc:
            raise ConfigError("model", str(exc)) from exc

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            input_slices=self.input_slices,
            encoder_channels=self.encoder_channels,
            decoder_width=self.decoder_width,
            guidance_mode=self.guidance_mode,
            downsampler_mode=self.downsampler_mode,
        )

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    # ------------------------------------------------------------- text I/O
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name}={_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return cls.from_dict(parse_kv(text))

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "TrainConfig":
        types = {f.name: f for f in fields(cls)}
        kw = {}
        for key, raw in d.items():
            if key not in types:
                raise ConfigError(key, "unknown configuration key")
            try:
                kw[key] = _parse_value(key, raw)
            except ValueError as exc:
                raise ConfigError(key, f"cannot parse {raw!r} ({exc})") from exc
        return cls(**kw)


_INT_KEYS = {"epochs", "batch_size", "steps_per_epoch", "max_steps", "seed", "checkpoint_every",
             "input_slices", "decoder_width"}
_FLOAT_KEYS = {"lesion_probability"}


def _format_value(v) -> str:
    if isinstance(v, tuple) and v and isinstance(v[0], tuple):
        return ",".join(f"{e}:{x!r}" for e, x in v)
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key in _INT_KEYS:
        return int(raw)
    if key in _FLOAT_KEYS:
        return float(raw)
    if key in ("lr_schedule", "aug_prob_schedule"):
        out = []
        for item in raw.split(","):
            e, v = item.split(":")
            out.append((int(e), float(v)))
        return tuple(out)
    if key == "encoder_channels":
        return tuple(int(x) for x in raw.split(","))
    return raw


def parse_kv(text: str) -> dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        k = k.strip()
        if k in out:
            raise ConfigError(k, "duplicate key")
        out[k] = v.strip()
    return out


def read_config(path) -> TrainConfig:
    return TrainConfig.from_text(Path(path).read_text())
