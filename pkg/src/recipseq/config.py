"""Training configuration and the flat ``key = value`` config file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Iterable


class ConfigError(ValueError):
    pass


@dataclass
class TrainingConfig:
    # loss weights
    lam: float = 5.0
    mu: float = 0.005
    # optimization
    lr: float = 1e-3
    batch_size: int = 256
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 10
    max_epochs: int = 100
    seed: int = 0
    # architecture
    n: int = 50
    d: int = 64
    d_factor: int = 64
    d_ff: int = 256
    layers: int = 2
    heads: int = 2
    dropout: float = 0.5
    embedding_dropout: bool = True
    # ablation switches
    share_embeddings: bool = True
    mask_mode: str = "perspective"
    micro_aggregation: str = "attention"
    self_distill: bool = True
    detach_teacher: bool = True
    share_alpha: bool = False
    # evaluation
    eval_k: int = 5
    eval_negatives: int = 100
    max_valid_instances: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.lam < 0 or self.mu < 0:
            raise ConfigError("lam and mu must be non-negative")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.mask_mode not in ("perspective", "bidirectional_all"):
            raise ConfigError(f"mask_mode must be 'perspective' or 'bidirectional_all', got {self.mask_mode!r}")
        if self.micro_aggregation not in ("attention", "mean"):
            raise ConfigError(f"micro_aggregation must be 'attention' or 'mean', got {self.micro_aggregation!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @property
    def betas(self) -> tuple[float, float]:
        return (self.beta1, self.beta2)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainingConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}; valid keys: {', '.join(sorted(known))}")
        return cls(**d)

    def replace(self, **changes) -> "TrainingConfig":
        return dataclasses.replace(self, **changes)


def _coerce(name: str, raw: str, typ) -> Any:
    raw = raw.strip()
    if typ in (bool, "bool"):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: cannot parse {raw!r} as a boolean")
    try:
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ}") from None
    return raw


def _field_types() -> dict[str, Any]:
    return {f.name: f.type for f in fields(TrainingConfig)}


def parse_pairs(pairs: Iterable[str], where: str = "override") -> dict[str, Any]:
    """Parse ``key=value`` strings (``#`` comments and blanks skipped); last writer wins."""
    types = _field_types()
    out: dict[str, Any] = {}
    for i, line in enumerate(pairs, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{where} {i}: expected key=value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(sorted(types))}")
        out[key] = _coerce(key, val, types[key])
    return out


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> TrainingConfig:
    values: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        values.update(parse_pairs(path.read_text(encoding="utf-8").splitlines(), where=f"{path} line"))
    values.update(parse_pairs(overrides))
    return TrainingConfig.from_dict(values)


def dump_config(cfg: TrainingConfig) -> str:
    def fmt(v):
        return str(v).lower() if isinstance(v, bool) else str(v)

    return "".join(f"{k} = {fmt(v)}\n" for k, v in cfg.to_dict().items())
