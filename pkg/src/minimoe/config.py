"""
Architecture and routing descriptors.

`ModelConfig` describes an encoder (dense or mixture-of-minimal-experts);
`RouterConfig` describes one routed block. Both are frozen dataclasses with
JSON round-tripping and validation that raises `ConfigError`.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Optional, Union

from .errors import ConfigError

ROUTING_ALGORITHMS = ("gating", "hash")
BALANCE_STAGES = ("distill_only", "distill_and_finetune")


@dataclass(frozen=True)
class RouterConfig:
    """Routing settings for one mixture block."""
    num_experts: int
    algorithm: str = "gating"            # "gating" | "hash"
    capacity_factor: float = 1.25
    balance_coeff: float = 0.01
    apply_balance_at: str = "distill_and_finetune"

    def __post_init__(self):
        if self.num_experts < 1:
            raise ConfigError(f"num_experts must be >= 1, got {self.num_experts}")
        if self.algorithm not in ROUTING_ALGORITHMS:
            raise ConfigError(f"unknown routing algorithm {self.algorithm!r}")
        # C = 0 is accepted: every token overflows (pure residual path)
        if self.capacity_factor < 0:
            raise ConfigError(f"capacity_factor must be >= 0, got {self.capacity_factor}")
        if self.balance_coeff < 0:
            raise ConfigError(f"balance_coeff must be >= 0, got {self.balance_coeff}")
        if self.apply_balance_at not in BALANCE_STAGES:
            raise ConfigError(f"unknown balance stage {self.apply_balance_at!r}")

    def capacity(self, num_tokens: int) -> int:
        """Per-expert quota ceil(C * n / m)."""
        return int(math.ceil(self.capacity_factor * num_tokens / self.num_experts))

    def balance_active(self, stage: str) -> bool:
        """Whether the balance objective is added at `stage` ("distill" | "finetune")."""
        if self.algorithm != "gating" or self.num_experts == 1:
            return False
        if stage == "finetune":
            return self.apply_balance_at == "distill_and_finetune"
        return True


@dataclass(frozen=True)
class ModelConfig:
    """
    Encoder architecture.

    m_mha / m_ffn are the expert counts per MHA / FFN block; (1, 1) is the
    dense model. head_dim defaults to hidden // num_heads.
    """
    num_layers: int
    hidden: int
    num_heads: int
    ffn_dim: int
    vocab_size: int
    max_seq_len: int = 128
    relation_heads: int = 32
    m_mha: int = 1
    m_ffn: int = 1
    has_aux_mha: bool = False
    head_dim: Optional[int] = None
    type_vocab_size: int = 2
    has_pooler: bool = False
    dropout: float = 0.1
    routing: str = "gating"
    capacity_factor: float = 1.25
    balance_coeff: float = 0.01
    apply_balance_at: str = "distill_and_finetune"
    hash_seed: int = 0

    def __post_init__(self):
        if self.head_dim is None:
            if self.num_heads < 1:
                raise ConfigError("num_heads must be >= 1")
            object.__setattr__(self, "head_dim", self.hidden // self.num_heads)
        if self.num_layers < 0 or self.hidden < 1 or self.ffn_dim < 1 or self.vocab_size < 1:
            raise ConfigError(f"invalid dimensions in {self.label}")
        if self.num_heads * self.head_dim != self.hidden:
            raise ConfigError(
                f"heads must partition the hidden size: {self.num_heads} x {self.head_dim} != {self.hidden}")
        if self.relation_heads < 1 or self.hidden % self.relation_heads != 0:
            raise ConfigError(f"hidden {self.hidden} is not divisible by relation_heads {self.relation_heads}")
        if self.m_mha < 1 or self.m_ffn < 1:
            raise ConfigError(f"expert counts must be >= 1, got ({self.m_mha}, {self.m_ffn})")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        # validates routing fields
        self.router_for(max(self.m_mha, self.m_ffn))

    # --------- derived ---------

    @property
    def label(self) -> str:
        base = f"{self.num_layers}L;{self.hidden}H"
        if self.is_moe:
            base += f"-{self.m_mha},{self.m_ffn}E"
        return base

    @property
    def is_moe(self) -> bool:
        return self.m_mha > 1 or self.m_ffn > 1

    @property
    def relation_head_dim(self) -> int:
        return self.hidden // self.relation_heads

    def router_for(self, num_experts: int) -> RouterConfig:
        return RouterConfig(
            num_experts=num_experts,
            algorithm=self.routing,
            capacity_factor=self.capacity_factor,
            balance_coeff=self.balance_coeff,
            apply_balance_at=self.apply_balance_at,
        )

    def with_experts(self, m_ffn: int, m_mha: Optional[int] = None) -> "ModelConfig":
        return replace(self, m_ffn=m_ffn, m_mha=self.m_mha if m_mha is None else m_mha)

    # --------- serialization ---------

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**data)

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()[:16]


def _minilm(layers: int, hidden: int, **overrides) -> ModelConfig:
    defaults = dict(
        num_layers=layers, hidden=hidden, num_heads=max(1, hidden // 64), ffn_dim=4 * hidden,
        vocab_size=30522, max_seq_len=512, relation_heads=32,
    )
    defaults.update(overrides)
    return ModelConfig(**defaults)


PRESETS: Dict[str, ModelConfig] = {
    "bert-base": ModelConfig(num_layers=12, hidden=768, num_heads=12, ffn_dim=3072, vocab_size=30522,
                             max_seq_len=512, has_pooler=True),
    "bert-large": ModelConfig(num_layers=24, hidden=1024, num_heads=16, ffn_dim=4096, vocab_size=30522,
                              max_seq_len=512, has_pooler=True),
    "minilm-6l-384h": _minilm(6, 384, num_heads=12),
    "minilm-4l-384h": _minilm(4, 384, num_heads=12),
    "minilm-3l-384h": _minilm(3, 384, num_heads=12),
    "minilm-4l-192h": _minilm(4, 192, num_heads=12),
    "minimoe-6l-384h": _minilm(6, 384, num_heads=12, m_ffn=4, has_aux_mha=True),
    "minimoe-4l-384h": _minilm(4, 384, num_heads=12, m_ffn=4, has_aux_mha=True),
    "minimoe-3l-384h": _minilm(3, 384, num_heads=12, m_ffn=4, has_aux_mha=True),
    "minimoe-4l-192h": _minilm(4, 192, num_heads=12, m_ffn=4, has_aux_mha=True),
    "desk-teacher": ModelConfig(num_layers=4, hidden=128, num_heads=4, ffn_dim=512, vocab_size=8000,
                                max_seq_len=128, relation_heads=32),
    "desk-student": ModelConfig(num_layers=2, hidden=64, num_heads=2, ffn_dim=256, vocab_size=8000,
                                max_seq_len=128, relation_heads=32, has_aux_mha=True),
}


def load_model_config(source: Union[str, Path, Dict[str, Any], ModelConfig]) -> ModelConfig:
    """Resolve a preset name, a JSON file path, a dict, or a ModelConfig."""
    if isinstance(source, ModelConfig):
        return source
    if isinstance(source, dict):
        return ModelConfig.from_dict(source)
    name = str(source)
    if name in PRESETS:
        return PRESETS[name]
    path = Path(name)
    if not path.exists():
        raise ConfigError(f"{name!r} is neither a preset ({', '.join(PRESETS)}) nor a file")
    with path.open("r", encoding="utf-8") as fh:
        data = json.load(fh)
    data.pop("schema", None)
    return ModelConfig.from_dict(data)


@dataclass(frozen=True)
class PretrainSettings:
    """MLM pretraining of a dense teacher (desk-scale stand-in for BERT)."""
    steps: int = 5000
    batch_size: int = 32
    seq_len: int = 64
    learning_rate: float = 5e-4
    warmup_proportion: float = 0.01
    weight_decay: float = 0.01
    eval_interval: int = 250
    dev_fraction: float = 0.05
    log_interval: int = 50

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PretrainSettings":
        return cls(**data)


@dataclass(frozen=True)
class FinetuneSettings:
    """
    Finetuning grid, scaled down to desk size.

    The grid is learning_rates x batch_sizes; each cell trains for up to
    `epochs` with early stopping after `patience` epochs without dev gain.
    """
    num_classes: int = 2
    learning_rates: tuple = (1e-4, 3e-4)
    batch_sizes: tuple = (16, 32)
    epochs: int = 10
    patience: int = 5
    warmup_proportion: float = 0.1
    weight_decay: float = 0.01
    freeze_body: bool = False
    apply_balance: Optional[bool] = None   # None: follow the student's router setting

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if not self.learning_rates or not self.batch_sizes:
            raise ConfigError("finetune grid must not be empty")
        object.__setattr__(self, "learning_rates", tuple(self.learning_rates))
        object.__setattr__(self, "batch_sizes", tuple(self.batch_sizes))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FinetuneSettings":
        return cls(**data)


@dataclass(frozen=True)
class DistillPlan:
    """
    Task-agnostic relation distillation from `teacher` into `student`,
    optionally through teacher assistants (largest first).
    """
    teacher: str
    student: ModelConfig
    assistants: tuple = ()
    learning_rate: float = 3e-4
    batch_size: int = 32
    seq_len: int = 64
    max_steps: int = 2000
    warmup_proportion: float = 0.01
    weight_decay: float = 0.01
    log_interval: int = 50
    apply_balance: bool = True
    seed: int = 0
    extra: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "assistants", tuple(load_model_config(a) for a in self.assistants))
        object.__setattr__(self, "student", load_model_config(self.student))
        if self.batch_size < 1 or self.max_steps < 0 or self.seq_len < 2:
            raise ConfigError("batch_size >= 1, max_steps >= 0 and seq_len >= 2 are required")
        if self.seq_len > self.student.max_seq_len:
            raise ConfigError(f"seq_len {self.seq_len} exceeds student max_seq_len {self.student.max_seq_len}")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["student"] = self.student.to_dict()
        data["assistants"] = [a.to_dict() for a in self.assistants]
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DistillPlan":
        data = dict(data)
        data.pop("schema", None)
        if "student" not in data:
            raise ConfigError("distill plan needs a student config")
        data.setdefault("teacher", "")
        data["student"] = load_model_config(data["student"])
        data["assistants"] = tuple(load_model_config(a) for a in data.get("assistants", ()))
        return cls(**data)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DistillPlan":
        with Path(path).open("r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))
