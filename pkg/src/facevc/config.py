"""Flat key=value training/model configuration."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .exceptions import ConfigurationError, ValidationError
from .losses import LossWeights


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 30
    batch_size: int = 16
    lr: float = 0.1
    momentum: float = 0.9
    q_steps: int = 5
    q_lr: float = 1e-2
    clip_norm: float = 5.0
    tau: float = 0.07
    lambda1: float = 0.1
    lambda2: float = 0.01
    lambda3: float = 0.1
    lambda4: float = 0.1
    lambda5: float = 1.0
    cpc_weight: float = 0.1
    commitment_weight: float = 0.25
    cpc_steps: int = 2
    hinge_margin: float = 1.0
    heldout_fraction: float = 0.2
    d_face: int = 64
    d_audio: int = 64
    d_model: int = 32
    d_k: int = 32
    d_spk: int = 32
    d_con: int = 16
    n_codes: int = 64
    n_prompts: int = 4
    n_mels: int = 80
    n_slots: int = 16
    ffn_hidden: int = 64
    content_hidden: int = 128
    decoder_hidden: int = 128
    d_pitch: int = 8
    pitch_bins: int = 16
    club_hidden: int = 32

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.type in ("int", int):
                if isinstance(value, bool) or not isinstance(value, int):
                    raise ConfigurationError(f"{f.name} must be an integer, got {value!r}")
            elif not isinstance(value, (int, float)) or not math.isfinite(value):
                raise ConfigurationError(f"{f.name} must be a finite number, got {value!r}")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        positive = [f.name for f in fields(self) if f.type in ("int", int) and f.name not in ("seed", "epochs")]
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        for name in ("lr", "q_lr", "tau", "clip_norm"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if not 0 < self.heldout_fraction < 1:
            raise ConfigurationError("heldout_fraction must lie in (0, 1)")
        try:
            self.weights
        except ValidationError as exc:
            raise ConfigurationError(str(exc)) from exc

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})

    def as_dict(self) -> dict:
        return asdict(self)


def _coerce(name: str, kind, text: str):
    try:
        if kind in ("int", int):
            return int(text)
        return float(text)
    except ValueError as exc:
        raise ConfigurationError(f"config key {name!r}: cannot parse {text!r}") from exc


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse ``key=value`` lines; ``#`` starts a comment, unknown keys are errors."""
    known = {f.name: f.type for f in fields(TrainConfig)}
    values = asdict(base or TrainConfig())
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigurationError(f"line {lineno}: unknown config key {key!r}")
        if key in seen:
            raise ConfigurationError(f"line {lineno}: duplicate config key {key!r}")
        seen.add(key)
        values[key] = _coerce(key, known[key], value)
    return TrainConfig(**values)


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    return parse_config_text(Path(path).read_text(), base)


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{k}={v!r}\n" for k, v in cfg.as_dict().items())
