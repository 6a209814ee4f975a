"""
Relation heads and the relation-alignment loss.

The A attention heads' projections are merged back to (n, d), re-split into R
contiguous chunks of width d^R = d / R, and each chunk becomes the
row-stochastic self-similarity softmax(X_r X_r^T / sqrt(d^R)). Teacher and
student then share (R, n) even when their hidden sizes differ.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError
from .functional import kl_div_rows, softmax_rows
from .layers import key_bias
from .tensor import Tensor


@dataclass
class RelationSet:
    """Q/K/V relation matrices, each (B, R, n, n) or (R, n, n)."""
    q_rel: Tensor
    k_rel: Tensor
    v_rel: Tensor
    head_dim: int
    row_mask: Optional[np.ndarray] = None   # (B, n) or (n,); True for real query rows

    @property
    def num_heads(self) -> int:
        return self.q_rel.shape[-3]

    @property
    def seq_len(self) -> int:
        return self.q_rel.shape[-1]

    def matrices(self):
        return self.q_rel, self.k_rel, self.v_rel


def _relation(x: Tensor, num_heads: int, key_mask: Optional[np.ndarray]) -> Tensor:
    batch, n, d = x.shape
    head_dim = d // num_heads
    chunks = x.reshape(batch, n, num_heads, head_dim).transpose(0, 2, 1, 3)
    scores = (chunks @ chunks.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(head_dim))
    bias = key_bias(key_mask, batch, n)
    if bias is not None:
        scores = scores + bias
    return softmax_rows(scores)


def relation_heads(qkv: Sequence[Tensor], num_heads: int,
                   key_mask: Optional[np.ndarray] = None) -> RelationSet:
    """
    Build the R-head RelationSet from merged Q, K, V projections.

    Args:
        qkv: three tensors of shape (n, d) or (B, n, d).
        num_heads: R; must divide d.
        key_mask: optional (B, n) mask of real tokens.

    Raises:
        ConfigError: d is not divisible by R.
    """
    q, k, v = qkv
    d = q.shape[-1]
    if num_heads < 1 or d % num_heads != 0:
        raise ConfigError(f"hidden size {d} is not divisible by {num_heads} relation heads")
    single = q.ndim == 2

    def batched(t: Tensor) -> Tensor:
        return t.reshape(1, *t.shape) if single else t

    rels = [_relation(batched(t), num_heads, key_mask) for t in (q, k, v)]
    if single:
        rels = [r.reshape(*r.shape[1:]) for r in rels]
    row_mask = None
    if key_mask is not None:
        row_mask = np.asarray(key_mask, dtype=bool)
        if single:
            row_mask = row_mask.reshape(-1)
    return RelationSet(rels[0], rels[1], rels[2], d // num_heads, row_mask)


def distill_loss(teacher: RelationSet, student: RelationSet) -> Tensor:
    """
    Sum over {Q, K, V} and over the R heads of the row-averaged KL(teacher || student).

    The teacher side is a detached target. Padded query rows are excluded.

    Raises:
        ContractError: the two sets disagree on (R, n) or batch shape.
    """
    if teacher.q_rel.shape != student.q_rel.shape:
        raise ContractError(
            f"relation sets do not match: teacher {teacher.q_rel.shape} vs student {student.q_rel.shape}")
    shape = student.q_rel.shape
    row_mask = student.row_mask if student.row_mask is not None else teacher.row_mask
    if row_mask is not None:
        # (B, n) -> (B, R, n): the same query rows count for every head
        row_mask = np.broadcast_to(np.expand_dims(row_mask, -2), shape[:-1])

    heads = student.num_heads
    total = None
    for t_rel, s_rel in zip(teacher.matrices(), student.matrices()):
        term = kl_div_rows(t_rel.data, s_rel, row_mask) * float(heads)
        total = term if total is None else total + term
    return total
