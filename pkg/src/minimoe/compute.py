"""
Parameter and FLOPs accounting, plus a wall-clock throughput harness.

All FLOPs figures are multiply-accumulate counts (MACs) unless named
otherwise. `gflops` follows the convention of published compression tables:
projection MACs only (Q/K/V/O, FFN, routing, pooler) in units of 1e9, which
excludes the two n x n attention products. `gflops_2x` is 2 x total MACs.
"""
from __future__ import annotations

import logging
import statistics
import time
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional

import numpy as np

from .config import ModelConfig
from .errors import ContractError
from .model import EncoderModel, encode
from .rng import stream
from .tensor import no_grad

logger = logging.getLogger(__name__)

SCHEMA = "v1"


@dataclass
class ComputeReport:
    label: str
    params_total: int = 0
    params_embedding: int = 0
    params_transformer: int = 0
    params_head: int = 0
    seq_len: int = 0
    flops_forward: int = 0          # MACs of the inference path
    attention_flops: int = 0        # MACs of the QK^T and AV products
    routing_flops: int = 0          # MACs of the gate projections
    throughput: Optional[float] = None  # tokens per millisecond

    @property
    def gflops(self) -> float:
        return (self.flops_forward - self.attention_flops) / 1e9

    @property
    def gflops_2x(self) -> float:
        return 2.0 * self.flops_forward / 1e9

    @property
    def routing_fraction(self) -> float:
        return self.routing_flops / self.flops_forward if self.flops_forward else 0.0

    def merge(self, other: "ComputeReport") -> "ComputeReport":
        """Fill this report's zero fields from `other`."""
        data = asdict(self)
        for key, value in asdict(other).items():
            if not data.get(key) and value:
                data[key] = value
        return ComputeReport(**data)

    def to_json(self) -> Dict[str, Any]:
        data = {"schema": SCHEMA, **asdict(self)}
        data.update(gflops=self.gflops, gflops_2x=self.gflops_2x, routing_fraction=self.routing_fraction)
        return data


def _mha_params(d: int) -> int:
    return 4 * d * d + 4 * d


def _ffn_params(d: int, d_ffn: int) -> int:
    return 2 * d * d_ffn + d_ffn + d


def _routed(block: int, num_experts: int, d: int) -> int:
    gate = d * num_experts if num_experts > 1 else 0
    return num_experts * block + gate + 2 * d     # experts, gate, norm


def count_params(config: ModelConfig) -> ComputeReport:
    """Closed-form parameter count; equals `tally_params` on an instantiated model."""
    d = config.hidden
    embedding = (config.vocab_size + config.max_seq_len + config.type_vocab_size) * d + 2 * d
    per_layer = _routed(_mha_params(d), config.m_mha, d) + _routed(_ffn_params(d, config.ffn_dim), config.m_ffn, d)
    transformer = config.num_layers * per_layer
    if config.has_aux_mha:
        transformer += _mha_params(d) + 2 * d
    head = config.vocab_size + (d * d + d if config.has_pooler else 0)
    return ComputeReport(
        label=config.label,
        params_total=embedding + transformer + head,
        params_embedding=embedding,
        params_transformer=transformer,
        params_head=head,
    )


def tally_params(model: EncoderModel) -> ComputeReport:
    """Exhaustive walk over the instantiated parameter containers."""
    groups = {"embedding": 0, "transformer": 0, "head": 0}
    for name, tensor in model.parameters():
        if name.startswith("embeddings."):
            groups["embedding"] += tensor.size
        elif name.startswith(("layer.", "aux_mha.")):
            groups["transformer"] += tensor.size
        else:
            groups["head"] += tensor.size
    return ComputeReport(
        label=model.config.label,
        params_total=sum(groups.values()),
        params_embedding=groups["embedding"],
        params_transformer=groups["transformer"],
        params_head=groups["head"],
    )


def flops_forward(config: ModelConfig, seq_len: int) -> ComputeReport:
    """
    Analytic MACs of one inference pass over `seq_len` tokens.

    Per layer: 4 n d^2 + 2 n^2 d (one MHA expert active), 2 n d d^I (one FFN
    expert active) and n d m for each routed block. The auxiliary MHA is a
    distillation-only block and is not part of the inference path.
    """
    if seq_len < 1:
        raise ContractError("seq_len must be >= 1")
    n, d = seq_len, config.hidden
    attention = config.num_layers * 2 * n * n * d
    projections = config.num_layers * (4 * n * d * d + 2 * n * d * config.ffn_dim)
    routing = 0
    for num_experts in (config.m_mha, config.m_ffn):
        if num_experts > 1:
            routing += config.num_layers * n * d * num_experts
    pooler = d * d if config.has_pooler else 0
    return ComputeReport(
        label=config.label,
        seq_len=n,
        flops_forward=projections + attention + routing + pooler,
        attention_flops=attention,
        routing_flops=routing,
    )


def compute_report(config: ModelConfig, seq_len: int) -> ComputeReport:
    return count_params(config).merge(flops_forward(config, seq_len))


@dataclass
class ThroughputReport:
    tokens_per_ms: float            # median over repeats
    samples: List[float]
    seq_len: int
    batch_size: int

    @property
    def cv(self) -> float:
        """Coefficient of variation of the samples."""
        if len(self.samples) < 2:
            return 0.0
        return statistics.pstdev(self.samples) / statistics.mean(self.samples)

    def to_json(self) -> Dict[str, Any]:
        return {"schema": SCHEMA, "tokens_per_ms": self.tokens_per_ms, "cv": self.cv,
                "seq_len": self.seq_len, "batch_size": self.batch_size, "repeats": len(self.samples)}


def measure_throughput(model: EncoderModel, seq_len: int, batch_size: int = 8, repeats: int = 20,
                       warmup: int = 1, seed: int = 0) -> ThroughputReport:
    """
    Median tokens per wall-clock millisecond of evaluation-mode forwards.

    Inputs are random content ids of full length (no padding). Thread count is
    whatever the BLAS backend was started with; pin it (OMP_NUM_THREADS=1)
    for stable numbers.
    """
    if warmup < 1 or repeats < 1:
        raise ContractError("measure_throughput needs warmup >= 1 and repeats >= 1")
    config = model.config
    if seq_len > config.max_seq_len:
        raise ContractError(f"seq_len {seq_len} exceeds max_seq_len {config.max_seq_len}")
    tokens = stream(seed, "bench", seq_len, batch_size).integers(
        min(5, config.vocab_size - 1), config.vocab_size, size=(batch_size, seq_len))
    inference = model.without_aux()

    samples: List[float] = []
    with no_grad():
        for _ in range(warmup):
            encode(tokens, inference)
        for _ in range(repeats):
            start = time.perf_counter()
            encode(tokens, inference)
            elapsed_ms = (time.perf_counter() - start) * 1000.0
            samples.append(batch_size * seq_len / max(elapsed_ms, 1e-9))
    report = ThroughputReport(float(np.median(samples)), samples, seq_len, batch_size)
    logger.info("%s: %.1f tokens/ms (cv %.3f)", config.label, report.tokens_per_ms, report.cv)
    return report
