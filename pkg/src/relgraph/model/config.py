"""Model and training configuration with the per-task-type defaults."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

HEAD_TYPES = ("mlp_entity", "two_tower", "idgnn")
AGGREGATIONS = ("sum", "mean")
ACTIVATIONS = ("relu", "linear")


@dataclass(frozen=True)
class EncoderConfig:
    hidden_dim: int = 128
    time_embedding: bool = True
    feature_mask: bool = False

    def __post_init__(self):
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be positive")


@dataclass(frozen=True)
class GnnConfig:
    num_layers: int = 2
    aggregation: str = "sum"
    activation: str = "relu"

    def __post_init__(self):
        if self.num_layers < 0:
            raise ValueError("num_layers must be non-negative")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class HeadConfig:
    head_type: str = "mlp_entity"

    def __post_init__(self):
        if self.head_type not in HEAD_TYPES:
            raise ValueError(f"unknown head type {self.head_type!r}")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.005
    max_epochs: int = 10
    batch_size: int = 512
    num_neighbors: int = 128
    sampling: str = "uniform"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rng_seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.max_epochs < 1 or self.batch_size < 1 or self.num_neighbors < 1:
            raise ValueError("invalid training configuration")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    gnn: GnnConfig = field(default_factory=GnnConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - {"encoder", "gnn", "head", "train"}
        if unknown:
            raise ValueError(f"unknown config sections {sorted(unknown)}")
        return cls(EncoderConfig(**d.get("encoder", {})), GnnConfig(**d.get("gnn", {})),
                   HeadConfig(**d.get("head", {})), TrainConfig(**d.get("train", {})))


def default_config(task_type: str, head_type: str | None = None) -> ModelConfig:
    """Defaults for a task type: lr 0.005 and 10 epochs for entity tasks, 0.001 and 20 for recommendation."""
    if task_type == "recommendation":
        return ModelConfig(head=HeadConfig(head_type or "idgnn"),
                           train=TrainConfig(learning_rate=0.001, max_epochs=20))
    if task_type in ("entity_classification", "entity_regression"):
        if head_type not in (None, "mlp_entity"):
            raise ValueError(f"head {head_type!r} does not apply to {task_type}")
        return ModelConfig()
    raise ValueError(f"unknown task type {task_type!r}")


def merge_config(base: ModelConfig, overrides: dict) -> ModelConfig:
    """Apply a partial ``{"section": {field: value}}`` document on top of ``base``."""
    sections = {}
    for name in ("encoder", "gnn", "head", "train"):
        cur = getattr(base, name)
        upd = overrides.get(name, {})
        unknown = set(upd) - set(cur.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown {name} fields {sorted(unknown)}")
        sections[name] = replace(cur, **upd)
    unknown = set(overrides) - set(sections)
    if unknown:
        raise ValueError(f"unknown config sections {sorted(unknown)}")
    return ModelConfig(**sections)
