"""
Task-agnostic relation distillation.

`run_distillation` trains a randomly initialized student so that the Q/K/V
relation heads of its last MHA (the auxiliary one when present) match the
teacher's last-layer relations; MoE students add the load-balancing
objective. `run_ta_chain` folds the same loop through teacher assistants.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .checkpoint import load_checkpoint, save_checkpoint
from .compute import count_params
from .config import DistillPlan, ModelConfig
from .corpus import make_window_batches
from .errors import ConfigError, ContractError, MiniMoEError, StageError, TrainingDivergedError
from .model import EncoderModel, encode, is_no_decay
from .optim import AdamW, linear_schedule
from .relation import distill_loss, relation_heads
from .rng import stream
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

SCHEMA = "v1"
STUDENT_FILE = "student.bin"
METRICS_FILE = "metrics.jsonl"


@dataclass
class MetricsRecord:
    """One JSONL row of the training audit trail."""
    step: int
    epoch: int
    loss_rel: float
    loss_balance: float
    lr: float
    f: List[float] = field(default_factory=list)          # FFN experts (MHA experts when only MHA is routed)
    dropped_frac: float = 0.0                              # over every routed block
    f_mha: List[float] = field(default_factory=list)      # MHA experts, when routed
    extra: Dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> Dict[str, Any]:
        data = {"schema": SCHEMA, **asdict(self)}
        data.update(data.pop("extra"))
        return data


class MetricsWriter:
    """Append-only JSONL sink; keeps records in memory when `path` is None."""

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path is not None else None
        self.records: List[Any] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")

    def write(self, record: Any) -> None:
        """`record` is any dataclass with a `to_json` method."""
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record.to_json(), sort_keys=True) + "\n")


def read_metrics(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_json(path, orient="records", lines=True)


def check_finite(loss: Tensor, step: int, last_good: Optional[Path] = None) -> None:
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDivergedError(
            f"loss became {value} at step {step}",
            last_good_checkpoint=None if last_good is None else str(last_good),
        )


@dataclass
class DistillResult:
    student: EncoderModel
    records: List[MetricsRecord]
    epoch_losses: List[float]
    checkpoint: Optional[Path] = None
    metrics_path: Optional[Path] = None

    @property
    def final_loss(self) -> float:
        return self.records[-1].loss_rel if self.records else float("nan")


def validate_plan(plan: DistillPlan, teacher_config: ModelConfig) -> None:
    """
    Raises:
        ConfigError: relation-head or vocabulary mismatch along the chain, a
            sequence length the teacher cannot take, or a chain that is not
            strictly decreasing in parameter count.
    """
    chain = [teacher_config, *plan.assistants, plan.student]
    for upper, lower in zip(chain, chain[1:]):
        if upper.relation_heads != lower.relation_heads:
            raise ConfigError(
                f"relation heads differ: {upper.label} has {upper.relation_heads}, "
                f"{lower.label} has {lower.relation_heads}")
        if upper.vocab_size != lower.vocab_size:
            raise ConfigError(f"vocabulary sizes differ: {upper.vocab_size} vs {lower.vocab_size}")
        if count_params(lower).params_total >= count_params(upper).params_total and plan.assistants:
            raise ConfigError(
                f"teacher-assistant chain must shrink: {lower.label} is not smaller than {upper.label}")
    if plan.seq_len > teacher_config.max_seq_len:
        raise ConfigError(f"seq_len {plan.seq_len} exceeds the teacher's max_seq_len")


def run_distillation(plan: DistillPlan, windows: Sequence[np.ndarray],
                     output_dir: Optional[Union[str, Path]] = None,
                     teacher: Optional[EncoderModel] = None,
                     stage: str = "distill") -> DistillResult:
    """
    Distill `plan.student` from the teacher on unmasked corpus windows.

    The teacher is frozen and evaluated without dropout; the student starts
    from a seeded random init. Loss = relation loss (+ balance loss for gated
    MoE students when plan.apply_balance). A record is written every
    plan.log_interval steps and at the last step.

    Raises:
        ContractError: fewer windows than one batch.
        ConfigError: plan inconsistent with the teacher.
        TrainingDivergedError: non-finite loss.
    """
    teacher = teacher if teacher is not None else load_checkpoint(plan.teacher)
    teacher.requires_grad_(False)
    student_config = plan.student
    validate_plan(replace(plan, assistants=()), teacher.config)
    if len(windows) < plan.batch_size:
        raise ContractError(f"corpus yields {len(windows)} windows, fewer than one batch of {plan.batch_size}")

    student = EncoderModel.initialize(student_config, rng=stream(plan.seed, stage, "student-init"))
    optimizer = AdamW(student.parameters(), lr=plan.learning_rate, weight_decay=plan.weight_decay,
                      no_decay=is_no_decay)
    schedule = linear_schedule(plan.learning_rate, plan.max_steps, plan.warmup_proportion)
    batches = make_window_batches(windows, plan.seq_len, plan.batch_size, plan.seed,
                                  max_seq_len=min(teacher.config.max_seq_len, student_config.max_seq_len),
                                  purpose=f"{stage}-data")
    dropout_rng = stream(plan.seed, stage, "dropout")
    router = student_config.router_for(max(student_config.m_mha, student_config.m_ffn))
    use_balance = plan.apply_balance and student_config.is_moe and router.balance_active("distill")

    output_dir = Path(output_dir) if output_dir is not None else None
    writer = MetricsWriter(output_dir / METRICS_FILE if output_dir is not None else None)
    epoch_sums: Dict[int, List[float]] = {}
    logger.info("distilling %s -> %s for %d steps (balance %s)",
                teacher.config.label, student_config.label, plan.max_steps, "on" if use_balance else "off")

    for step in range(plan.max_steps):
        batch = next(batches)
        with no_grad():
            t_out = encode(batch.tokens, teacher, lengths=batch.lengths)
            t_rel = relation_heads(t_out.final_qkv, teacher.config.relation_heads, t_out.key_mask)
        s_out = encode(batch.tokens, student, lengths=batch.lengths, rng=dropout_rng)
        s_rel = relation_heads(s_out.final_qkv, student_config.relation_heads, s_out.key_mask)
        loss_rel = distill_loss(t_rel, s_rel)
        loss = loss_rel + s_out.balance_loss if use_balance else loss_rel
        check_finite(loss, step)

        optimizer.zero_grad()
        loss.backward()
        lr = schedule(step)
        optimizer.step(lr)

        epoch_sums.setdefault(batch.epoch, []).append(loss_rel.item())
        if (step + 1) % plan.log_interval == 0 or step + 1 == plan.max_steps:
            by_kind = s_out.routing_by_kind()
            summary = s_out.routing_summary()
            mha = by_kind.get("mha")
            routed = sum(s.total_tokens for s in by_kind.values())
            record = MetricsRecord(
                step=step + 1, epoch=batch.epoch, loss_rel=loss_rel.item(),
                loss_balance=s_out.balance_loss.item(), lr=lr,
                f=[] if summary is None else [float(v) for v in summary.f],
                f_mha=[] if mha is None else [float(v) for v in mha.f],
                dropped_frac=sum(s.dropped_tokens for s in by_kind.values()) / routed if routed else 0.0,
            )
            writer.write(record)
            logger.info("[%s] step %d epoch %d loss_rel %.5f balance %.5f lr %.2e",
                        stage, record.step, record.epoch, record.loss_rel, record.loss_balance, lr)

    checkpoint = None
    if output_dir is not None:
        checkpoint = save_checkpoint(student, output_dir / STUDENT_FILE, metadata={
            "stage": stage, "plan": plan.to_dict(), "teacher": teacher.config.label,
            "teacher_checksum": teacher.checksum(),
        })
    epoch_losses = [float(np.mean(epoch_sums[e])) for e in sorted(epoch_sums)]
    return DistillResult(student, writer.records, epoch_losses, checkpoint, writer.path)


def run_ta_chain(plan: DistillPlan, windows: Sequence[np.ndarray],
                 output_dir: Optional[Union[str, Path]] = None,
                 teacher: Optional[EncoderModel] = None) -> DistillResult:
    """
    teacher -> TA_1 -> ... -> student, each stage distilling from the previous
    stage's student with the plan's seed. With no assistants this is exactly
    `run_distillation`.

    Raises:
        StageError: a stage failed; `stage_index` is its 0-based position.
    """
    teacher = teacher if teacher is not None else load_checkpoint(plan.teacher)
    validate_plan(plan, teacher.config)
    if not plan.assistants:
        return run_distillation(plan, windows, output_dir, teacher)

    stages = [*plan.assistants, plan.student]
    output_dir = Path(output_dir) if output_dir is not None else None
    current = teacher
    result: Optional[DistillResult] = None
    for index, student_config in enumerate(stages):
        stage_plan = replace(plan, student=student_config, assistants=())
        stage_dir = output_dir / f"stage-{index}" if output_dir is not None else None
        logger.info("TA chain stage %d/%d: %s -> %s", index + 1, len(stages),
                    current.config.label, student_config.label)
        try:
            result = run_distillation(stage_plan, windows, stage_dir, current)
        except MiniMoEError as exc:
            raise StageError(str(exc), stage_index=index) from exc
        current = result.student
    return result
