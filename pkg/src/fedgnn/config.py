"""Training configuration with the published defaults."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields

from .model import VARIANTS
from .privacy import LdpConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    round_size: int = 128
    epochs: int = 3
    t_threshold: float = 2.0
    lr: float = 0.01
    dim: int = 256
    m: int = 1000
    delta: float = 0.1
    lam: float = 0.2
    variant: str = "gat"
    dropout: float = 0.2
    neighbor_cap: int = 32
    seed: int = 0
    minibatch_size: int | None = None
    expansion: bool = True
    train_frac: float = 0.8
    val_frac: float = 0.1

    def __post_init__(self):
        for name in ("round_size", "epochs", "dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("m", "neighbor_cap", "t_threshold"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not self.lr >= 0:
            raise ConfigError("lr must be >= 0")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.minibatch_size is not None and self.minibatch_size < 1:
            raise ConfigError("minibatch_size must be >= 1")
        try:
            LdpConfig(self.delta, self.lam)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def ldp(self) -> LdpConfig:
        return LdpConfig(self.delta, self.lam)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        defaults = cls()
        clean = {}
        for key, value in values.items():
            expected = type(getattr(defaults, key))
            if value is None and key == "minibatch_size":
                clean[key] = None
                continue
            if key == "minibatch_size":
                expected = int
            if expected is float and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if expected is float and value in ("inf", "Infinity"):
                value = float("inf")
            if not isinstance(value, expected) or (expected is int and isinstance(value, bool)):
                raise ConfigError(
                    f"{key}: expected {expected.__name__}, got {type(value).__name__}"
                )
            clean[key] = value
        return cls(**clean)

    def digest(self) -> str:
        """Hash of every field; checkpoints carry it to reject mismatched configs."""
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]
