"""
Downstream finetuning of a distilled student on a classification task.

A linear head reads the first-token state (through the pooler when the
student has one). Each (learning rate, batch size) cell of the grid starts
from a fresh copy of the student, trains with early stopping on dev
accuracy, and the best cell is reported.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from .checkpoint import load_checkpoint
from .config import FinetuneSettings, ModelConfig
from .corpus import TaskDataset
from .errors import ContractError
from .functional import cross_entropy
from .model import EncoderModel, encode, is_no_decay, pooled
from .optim import AdamW, linear_schedule
from .rng import stream
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

SCHEMA = "v1"
HEAD_STD = 0.02
EVAL_BATCH = 64


@dataclass
class FinetuneRecord:
    learning_rate: float
    batch_size: int
    epoch: int
    train_loss: float
    loss_balance: float
    dev_accuracy: float


@dataclass
class FinetuneResult:
    best_dev_accuracy: float
    best_cell: Tuple[float, int]
    records: List[FinetuneRecord]

    @property
    def table(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.records])

    def to_json(self) -> Dict:
        return {
            "schema": SCHEMA,
            "best_dev_accuracy": self.best_dev_accuracy,
            "best_learning_rate": self.best_cell[0],
            "best_batch_size": self.best_cell[1],
        }


class Classifier:
    """Student body plus a linear head over the pooled first-token state."""

    def __init__(self, body: EncoderModel, num_classes: int, rng: np.random.Generator):
        self.body = body
        d = body.config.hidden
        self.head = {
            "classifier.w": Tensor(rng.normal(0.0, HEAD_STD, size=(d, num_classes)), requires_grad=True),
            "classifier.b": Tensor(np.zeros(num_classes), requires_grad=True),
        }

    def parameters(self) -> List[Tuple[str, Tensor]]:
        body = [(n, t) for n, t in self.body.parameters() if t.requires_grad]
        return body + list(self.head.items())

    def forward(self, tokens: np.ndarray, lengths: np.ndarray, type_ids: np.ndarray,
                rng: Optional[np.random.Generator] = None) -> Tuple[Tensor, Tensor]:
        """Returns (logits, balance loss of the body)."""
        out = encode(tokens, self.body, lengths=lengths, type_ids=type_ids, rng=rng)
        state = pooled(out.hidden, self.body)
        return state @ self.head["classifier.w"] + self.head["classifier.b"], out.balance_loss

    def accuracy(self, data: TaskDataset) -> float:
        correct = 0
        with no_grad():
            for start in range(0, len(data), EVAL_BATCH):
                part = slice(start, start + EVAL_BATCH)
                logits, _ = self.forward(data.tokens[part], data.lengths[part], data.type_ids[part])
                correct += int((logits.data.argmax(axis=-1) == data.labels[part]).sum())
        return correct / len(data)


def _check_labels(data: TaskDataset, num_classes: int, name: str) -> None:
    if len(data) == 0:
        raise ContractError(f"{name} set is empty")
    labels = np.asarray(data.labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise ContractError(f"{name} labels must be integers, got {labels.dtype}")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ContractError(f"{name} label outside [0, {num_classes}): {int(labels.min())}..{int(labels.max())}")


def _balance_enabled(config: ModelConfig, settings: FinetuneSettings) -> bool:
    if not config.is_moe:
        return False
    router = config.router_for(max(config.m_mha, config.m_ffn))
    if settings.apply_balance is None:
        return router.balance_active("finetune")
    return settings.apply_balance and router.algorithm == "gating"


def _train_cell(student: EncoderModel, train: TaskDataset, dev: TaskDataset, settings: FinetuneSettings,
                lr: float, batch_size: int, seed: int) -> Tuple[float, List[FinetuneRecord]]:
    body = student.without_aux().copy()
    if settings.freeze_body:
        body.requires_grad_(False)
    model = Classifier(body, settings.num_classes, stream(seed, "finetune", lr, batch_size, "head"))
    use_balance = _balance_enabled(body.config, settings)
    steps_per_epoch = math.ceil(len(train) / batch_size)
    optimizer = AdamW(model.parameters(), lr=lr, weight_decay=settings.weight_decay, no_decay=is_no_decay)
    schedule = linear_schedule(lr, settings.epochs * steps_per_epoch, settings.warmup_proportion)
    dropout_rng = None if settings.freeze_body else stream(seed, "finetune", lr, batch_size, "dropout")

    records: List[FinetuneRecord] = []
    best, since_best, step = -1.0, 0, 0
    for epoch in range(settings.epochs):
        order = stream(seed, "finetune", lr, batch_size, "shuffle", epoch).permutation(len(train))
        losses, balances = [], []
        for start in range(0, len(order), batch_size):
            rows = order[start:start + batch_size]
            logits, balance = model.forward(train.tokens[rows], train.lengths[rows], train.type_ids[rows],
                                            rng=dropout_rng)
            loss = cross_entropy(logits, train.labels[rows])
            if use_balance:
                loss = loss + balance
            optimizer.zero_grad()
            loss.backward()
            optimizer.step(schedule(step))
            step += 1
            losses.append(loss.item())
            balances.append(balance.item())
        accuracy = model.accuracy(dev)
        records.append(FinetuneRecord(lr, batch_size, epoch, float(np.mean(losses)),
                                      float(np.mean(balances)), accuracy))
        logger.debug("lr %.1e bs %d epoch %d loss %.4f dev acc %.4f", lr, batch_size, epoch,
                     records[-1].train_loss, accuracy)
        if accuracy > best:
            best, since_best = accuracy, 0
        else:
            since_best += 1
            if since_best >= settings.patience:
                logger.info("early stop at epoch %d (lr %.1e, bs %d)", epoch, lr, batch_size)
                break
    return best, records


def run_finetune(student: Union[EncoderModel, str, Path], train: TaskDataset, dev: TaskDataset,
                 settings: Optional[FinetuneSettings] = None, seed: int = 0,
                 output_dir: Optional[Union[str, Path]] = None) -> FinetuneResult:
    """
    Grid-search finetuning; returns the best dev accuracy over all cells.

    The auxiliary MHA is dropped first. Balance loss is added for gated MoE
    students when the router applies it at finetuning (or when
    settings.apply_balance forces it).

    Raises:
        ContractError: a label outside [0, settings.num_classes) or an empty set.
    """
    settings = settings or FinetuneSettings(num_classes=train.num_classes)
    student = load_checkpoint(student) if isinstance(student, (str, Path)) else student
    _check_labels(train, settings.num_classes, "train")
    _check_labels(dev, settings.num_classes, "dev")

    records: List[FinetuneRecord] = []
    best_accuracy, best_cell = -1.0, (settings.learning_rates[0], settings.batch_sizes[0])
    for lr in settings.learning_rates:
        for batch_size in settings.batch_sizes:
            accuracy, cell_records = _train_cell(student, train, dev, settings, lr, batch_size, seed)
            records.extend(cell_records)
            logger.info("finetune cell lr %.1e bs %d: best dev accuracy %.4f", lr, batch_size, accuracy)
            if accuracy > best_accuracy:
                best_accuracy, best_cell = accuracy, (lr, batch_size)

    result = FinetuneResult(best_accuracy, best_cell, records)
    if output_dir is not None:
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        frame = result.table
        frame.insert(0, "schema", SCHEMA)
        frame.to_json(output_dir / "finetune.jsonl", orient="records", lines=True)
        (output_dir / "finetune.json").write_text(json.dumps(result.to_json(), sort_keys=True, indent=2))
    return result


def frozen_random_baseline(config: ModelConfig, train: TaskDataset, dev: TaskDataset,
                           settings: Optional[FinetuneSettings] = None, seed: int = 0) -> FinetuneResult:
    """Head-only training on a randomly initialized, frozen body of `config`."""
    settings = settings or FinetuneSettings(num_classes=train.num_classes)
    body = EncoderModel.initialize(config, rng=stream(seed, "baseline", "init"))
    return run_finetune(body, train, dev, replace(settings, freeze_body=True), seed)
