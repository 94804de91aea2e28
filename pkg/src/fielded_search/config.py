"""
Configuration management for fielded-search.
"""

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

import yaml

from fielded_search.models import FIELD_ORDER, FieldName, InputError

DEFAULT_SEED = 13


@dataclass
class EncoderConfig:
    """Shape of the context encoder and the matching head."""

    vocab_size: int = 2
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    query_max_len: int = 16
    field_max_len: int = 64
    head_hidden: int = 256
    dropout_p: float = 0.1
    head_dropout_p: float = 0.5
    dtype: str = "float32"
    fielded: bool = True

    def validate(self) -> None:
        """
        Check structural invariants.

        Raises:
            InputError: If a dimension is invalid
        """
        for name in ("vocab_size", "d_model", "n_heads", "d_ff", "query_max_len",
                     "field_max_len", "head_hidden"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_layers < 0:
            raise InputError(f"n_layers must be >= 0, got {self.n_layers}")
        if self.d_model % self.n_heads != 0:
            raise InputError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        for name in ("dropout_p", "head_dropout_p"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise InputError(f"{name} must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise InputError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def feature_size(self) -> int:
        """Width of the matching feature vector fed to the head."""
        rows = len(FIELD_ORDER) if self.fielded else 1
        return 2 * rows * self.d_model + rows * self.query_max_len


@dataclass
class TrainConfig:
    """Optimization settings."""

    base_lr: float = 1e-4
    batch_size: int = 16
    epochs: int = 5
    warmup_fraction: float = 0.10
    weight_decay: float = 0.01
    lr_decay: str = "linear"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = DEFAULT_SEED
    eval_k: int = 5

    def validate(self) -> None:
        if not 0.0 < self.warmup_fraction < 1.0:
            raise InputError("warmup_fraction must lie in (0, 1)")
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")
        if self.epochs < 1:
            raise InputError("epochs must be >= 1")
        if self.lr_decay not in ("linear", "none"):
            raise InputError(f"lr_decay must be 'linear' or 'none', got {self.lr_decay}")


@dataclass
class Bm25Params:
    """BM25 / BM25F parameters; field maps are keyed by FieldName."""

    k1: float = 1.2
    b: float = 0.75
    field_weights: Dict[FieldName, float] = field(
        default_factory=lambda: {name: 1.0 for name in FIELD_ORDER}
    )
    field_b: Dict[FieldName, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.k1 <= 0:
            raise InputError(f"k1 must be > 0, got {self.k1}")
        if not 0.0 <= self.b <= 1.0:
            raise InputError(f"b must lie in [0, 1], got {self.b}")
        if any(w < 0 for w in self.field_weights.values()):
            raise InputError("field weights must be >= 0")
        if not any(w > 0 for w in self.field_weights.values()):
            raise InputError("at least one field weight must be > 0")
        if any(not 0.0 <= v <= 1.0 for v in self.field_b.values()):
            raise InputError("per-field b must lie in [0, 1]")

    def weight(self, name: FieldName) -> float:
        return self.field_weights.get(name, 0.0)

    def b_for(self, name: FieldName) -> float:
        return self.field_b.get(name, self.b)

    def to_dict(self) -> Dict:
        """Convert to dictionary for YAML/JSON serialization."""
        return {
            "k1": self.k1,
            "b": self.b,
            "field_weights": {n.value: w for n, w in self.field_weights.items()},
            "field_b": {n.value: v for n, v in self.field_b.items()},
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Bm25Params":
        return cls(
            k1=float(data.get("k1", 1.2)),
            b=float(data.get("b", 0.75)),
            field_weights={
                FieldName.parse(k): float(v)
                for k, v in data.get("field_weights", {n.value: 1.0 for n in FIELD_ORDER}).items()
            },
            field_b={FieldName.parse(k): float(v) for k, v in data.get("field_b", {}).items()},
        )


@dataclass
class DataConfig:
    """Dataset construction settings."""

    click_threshold: int = 5
    psr_threshold: float = 2.5
    min_query_chars: int = 3
    min_fields: int = 2
    search_terms_top_k: int = 10
    validation_size: float = 0.1
    test_size: float = 0.1
    min_freq: int = 1
    max_malformed_fraction: float = 0.01


@dataclass
class RunConfig:
    """Everything a subcommand needs, assembled from defaults, file and flags."""

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = DEFAULT_SEED
    threads: int = 1
    out_dir: Path = field(
        default_factory=lambda: Path(os.getenv("FIELDED_SEARCH_OUT_DIR", "output"))
    )

    def sections(self) -> List[Any]:
        return [self.encoder, self.train, self.data]

    def apply(self, overrides: Mapping[str, Any]) -> None:
        """
        Apply flat key-value overrides.

        Keys are looked up across all sections; `seed` also seeds training.

        Raises:
            InputError: If a key is unknown or a value does not coerce
        """
        for key, value in overrides.items():
            if key == "seed":
                self.seed = int(value)
                self.train.seed = int(value)
                continue
            if key == "threads":
                self.threads = int(value)
                continue
            if key == "out_dir":
                self.out_dir = Path(value)
                continue
            target = _section_for(self.sections(), key)
            if target is None:
                raise InputError(f"Unknown configuration key '{key}'")
            setattr(target, key, _coerce(target, key, value))


def _section_for(sections: List[Any], key: str) -> Optional[Any]:
    for section in sections:
        if key in {f.name for f in dataclasses.fields(section)}:
            return section
    return None


def _coerce(section: Any, key: str, value: Any) -> Any:
    current = getattr(section, key)
    try:
        if isinstance(current, bool):
            if isinstance(value, str):
                return value.strip().lower() in ("1", "true", "yes", "on")
            return bool(value)
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError) as e:
        raise InputError(f"Invalid value for '{key}': {value!r}") from e


def parse_overrides(items: Tuple[str, ...]) -> Dict[str, str]:
    """Parse repeated `key=value` command-line items."""
    result = {}
    for item in items:
        if "=" not in item:
            raise InputError(f"Expected key=value, got '{item}'")
        key, value = item.split("=", 1)
        result[key.strip()] = value.strip()
    return result


def load_config(config_file: Optional[Path] = None, overrides: Optional[Mapping] = None) -> RunConfig:
    """
    Build a run configuration: defaults, then config file, then overrides.

    Args:
        config_file: Optional path to a flat YAML config file
        overrides: Optional flat key-value overrides from the command line

    Returns:
        RunConfig instance
    """
    config = RunConfig()
    if config_file is not None:
        if not config_file.exists():
            raise FileNotFoundError(f"Config file not found: {config_file}")
        with open(config_file, "r") as f:
            data = yaml.safe_load(f) or {}
        if not isinstance(data, dict):
            raise InputError(f"Config file {config_file} must hold a flat mapping")
        nested = [k for k, v in data.items() if isinstance(v, (dict, list))]
        if nested:
            raise InputError(f"Config keys must be flat; nested values for {nested}")
        config.apply(data)
    if overrides:
        config.apply(overrides)
    config.encoder.validate()
    config.train.validate()
    return config


def load_bm25_params(path: Path) -> Bm25Params:
    """Load tuned BM25/BM25F parameters written by `save_bm25_params`."""
    if not path.exists():
        raise FileNotFoundError(f"Parameter file not found: {path}")
    with open(path, "r") as f:
        data = yaml.safe_load(f) or {}
    return Bm25Params.from_dict(data)


def save_bm25_params(params: Bm25Params, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump(params.to_dict(), f, sort_keys=True)
