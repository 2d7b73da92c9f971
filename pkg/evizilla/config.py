"""Training configuration: the frozen ``TrainConfig``, JSON loading, env overrides, hashing."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
import hashlib
import json
import math
import os
from pathlib import Path
from typing import Any, ClassVar, Dict, List, Mapping, Optional, Tuple

from .errors import InputError, ParseError

ENV_PREFIX = "EVIZILLA_"

_FALSE_WORDS = {"0", "false", "no", "off"}
_TRUE_WORDS = {"1", "true", "yes", "on"}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    weight_decay: float = 5e-3
    hidden_size: int = 64
    dropout_rate: float = 0.2
    perturb_sigma: float = 0.3
    propagation_steps: int = 8
    include_hop0: bool = True
    lambda_kl: float = 0.05
    lambda_dis: float = 0.3
    max_epochs: int = 1000
    patience: int = 100
    seed: int = 0
    # explicit hop subset; overrides include_hop0 when set
    hops: Optional[Tuple[int, ...]] = None
    # center and unit-scale every propagated hop before the evidence head
    normalize_hops: bool = False

    # only sweep cells may pin the weights with a zero learning rate
    _zero_learning_rate_ok: ClassVar[bool] = False

    def __post_init__(self):
        if self.hops is not None:
            object.__setattr__(self, "hops", tuple(int(h) for h in self.hops))
        problems: List[str] = []
        lr_floor_ok = self.learning_rate > 0.0 or (self._zero_learning_rate_ok and self.learning_rate == 0.0)
        if not (math.isfinite(self.learning_rate) and lr_floor_ok):
            problems.append(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (math.isfinite(self.weight_decay) and self.weight_decay >= 0.0):
            problems.append(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.hidden_size < 1:
            problems.append(f"hidden_size must be >= 1, got {self.hidden_size}")
        if not 0.0 <= self.dropout_rate < 1.0:
            problems.append(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if not 0.0 <= self.perturb_sigma < 1.0:
            problems.append(f"perturb_sigma must be in [0, 1), got {self.perturb_sigma}")
        if self.propagation_steps < 1:
            problems.append(f"propagation_steps must be >= 1, got {self.propagation_steps}")
        for name in ("lambda_kl", "lambda_dis"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0.0):
                problems.append(f"{name} must be >= 0, got {v}")
        if self.max_epochs < 0:
            problems.append(f"max_epochs must be >= 0, got {self.max_epochs}")
        if self.patience < 1:
            problems.append(f"patience must be >= 1, got {self.patience}")
        if self.hops is not None:
            if not self.hops:
                problems.append("hops must not be empty")
            bad = [h for h in self.hops if not 0 <= h <= self.propagation_steps]
            if bad:
                problems.append(f"hops {bad} outside 0..{self.propagation_steps}")
        if problems:
            raise InputError("invalid training config: " + "; ".join(problems))

    def hop_set(self) -> Tuple[int, ...]:
        if self.hops is not None:
            return tuple(sorted(set(self.hops)))
        start = 0 if self.include_hop0 else 1
        return tuple(range(start, self.propagation_steps + 1))

    def replace(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["hops"] = list(self.hops) if self.hops is not None else None
        return out


class SweepConfig(TrainConfig):
    """A grid cell; unlike a plain config it may carry learning_rate 0."""

    _zero_learning_rate_ok: ClassVar[bool] = True

    @classmethod
    def from_config(cls, config: TrainConfig) -> "SweepConfig":
        return cls(**{f.name: getattr(config, f.name) for f in fields(config)})


_FIELD_TYPES: Dict[str, str] = {
    "learning_rate": "float",
    "weight_decay": "float",
    "hidden_size": "int",
    "dropout_rate": "float",
    "perturb_sigma": "float",
    "propagation_steps": "int",
    "include_hop0": "bool",
    "lambda_kl": "float",
    "lambda_dis": "float",
    "max_epochs": "int",
    "patience": "int",
    "seed": "int",
    "hops": "hops",
    "normalize_hops": "bool",
}

FIELD_NAMES: Tuple[str, ...] = tuple(f.name for f in fields(TrainConfig))


def _coerce(name: str, value: Any) -> Any:
    kind = _FIELD_TYPES[name]
    try:
        if kind == "float":
            if isinstance(value, bool):
                raise ValueError("boolean")
            return float(value)
        if kind == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError("not an integer")
            return int(value)
        if kind == "bool":
            if isinstance(value, bool):
                return value
            token = str(value).strip().lower()
            if token in _TRUE_WORDS:
                return True
            if token in _FALSE_WORDS:
                return False
            raise ValueError("not a boolean")
        if value is None:
            return None
        if isinstance(value, str):
            token = value.strip()
            if token.lower() in {"", "none", "all"}:
                return None
            return tuple(int(t) for t in token.split(",") if t.strip())
        return tuple(int(v) for v in value)
    except (TypeError, ValueError) as exc:
        raise InputError(f"config field {name!r} cannot take value {value!r} ({exc})") from exc


def from_mapping(values: Mapping[str, Any], base: TrainConfig | None = None) -> TrainConfig:
    """Overlay ``values`` onto ``base`` (defaults when omitted); unknown keys are rejected."""
    unknown = sorted(set(values) - set(FIELD_NAMES))
    if unknown:
        raise InputError(f"unknown config field(s): {', '.join(unknown)}")
    base = base or TrainConfig()
    changes = {k: _coerce(k, v) for k, v in values.items()}
    return replace(base, **changes)


def env_overrides(environ: Mapping[str, str] | None = None) -> Dict[str, Any]:
    """Collect ``EVIZILLA_<FIELD>`` variables that name TrainConfig fields."""
    environ = os.environ if environ is None else environ
    out: Dict[str, Any] = {}
    for name in FIELD_NAMES:
        raw = environ.get(ENV_PREFIX + name.upper())
        if raw is None or not raw.strip():
            continue
        out[name] = _coerce(name, raw)
    return out


def _read_json_object(path: Path) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON ({exc.msg})", path=path, line_number=exc.lineno) from exc
    if not isinstance(data, dict):
        raise ParseError("config must be a JSON object", path=path, line_number=1)
    return data


def load_config(
    path: Path | str | None,
    *,
    overrides: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
) -> TrainConfig:
    """defaults < file < environment < explicit overrides."""
    config = TrainConfig()
    if path is not None:
        config = from_mapping(_read_json_object(Path(path)), config)
    config = from_mapping(env_overrides(environ), config)
    if overrides:
        config = from_mapping({k: v for k, v in overrides.items() if v is not None}, config)
    return config


def load_search_space(
    path: Path | str,
    *,
    overrides: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
) -> Tuple[TrainConfig, Dict[str, List[Any]]]:
    """Split a grid file into a base config (scalar fields) and per-field value lists."""
    raw = _read_json_object(Path(path))
    scalars: Dict[str, Any] = {}
    space: Dict[str, List[Any]] = {}
    for key, value in raw.items():
        if key not in FIELD_NAMES:
            raise InputError(f"unknown config field(s): {key}")
        if isinstance(value, list) and key != "hops":
            if not value:
                raise InputError(f"search range for {key!r} is empty")
            space[key] = [_coerce(key, v) for v in value]
        elif key == "hops" and isinstance(value, list) and value and isinstance(value[0], list):
            space[key] = [_coerce(key, v) for v in value]
        else:
            scalars[key] = value
    base = from_mapping(scalars)
    base = from_mapping(env_overrides(environ), base)
    if overrides:
        base = from_mapping({k: v for k, v in overrides.items() if v is not None}, base)
    return base, space


def canonical_json(values: Mapping[str, Any] | TrainConfig) -> str:
    if isinstance(values, TrainConfig):
        values = values.to_dict()
    return json.dumps(values, sort_keys=True, separators=(",", ":"))


def snapshot_hash(values: Mapping[str, Any] | TrainConfig) -> str:
    return hashlib.sha256(canonical_json(values).encode("utf-8")).hexdigest()[:16]


def config_hash(config: TrainConfig) -> str:
    return snapshot_hash(config)


FULL_SEARCH_SPACE: Dict[str, List[Any]] = {
    "learning_rate": [5e-3, 1e-2, 2e-2],
    "weight_decay": [1e-3, 5e-3, 1e-2, 2e-2],
    "hidden_size": [32, 64, 256],
    "dropout_rate": [0.0, 0.2, 0.4, 0.6, 0.8],
    "perturb_sigma": [0.1, 0.3, 0.5, 0.7],
    "propagation_steps": [2, 4, 6, 8, 16, 32],
    "lambda_kl": [0.01, 0.05, 0.1],
    "lambda_dis": [0.1, 0.3, 0.5],
}


__all__ = [
    "ENV_PREFIX",
    "FIELD_NAMES",
    "FULL_SEARCH_SPACE",
    "SweepConfig",
    "TrainConfig",
    "canonical_json",
    "config_hash",
    "env_overrides",
    "from_mapping",
    "load_config",
    "load_search_space",
    "snapshot_hash",
]
