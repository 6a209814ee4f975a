"""
Mixture of minimal experts: top-1 gating, capacity dropping, hash routing,
the load-balancing objective and routing statistics.

A routed block keeps its experts under `expert.{k}.` and its gate matrix under
`gate`; the residual norm (`norm.gain`, `norm.bias`) is shared by all experts.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from .config import RouterConfig
from .errors import ContractError, DimensionError
from .functional import STOCHASTIC_TOLERANCE, softmax_rows
from .layers import MhaOutput, ParamMap, attend_rows, ffn_expert, mha_attention, residual_norm, subtree
from .rng import stream
from .tensor import Tensor, scatter_rows

logger = logging.getLogger(__name__)

DROPPED = -1


@dataclass
class RoutingStats:
    """
    Mergeable per-expert tallies for one routed block.

    dispatch_counts counts every routed token under its argmax expert, dropped
    tokens included; dropped_tokens says how many of them overflowed.
    """
    dispatch_counts: np.ndarray
    prob_mass: np.ndarray
    total_tokens: int = 0
    dropped_tokens: int = 0

    @classmethod
    def empty(cls, num_experts: int) -> "RoutingStats":
        return cls(np.zeros(num_experts, dtype=np.int64), np.zeros(num_experts), 0, 0)

    @property
    def num_experts(self) -> int:
        return len(self.dispatch_counts)

    @property
    def f(self) -> np.ndarray:
        if self.total_tokens == 0:
            return np.zeros(self.num_experts)
        return self.dispatch_counts / self.total_tokens

    @property
    def P(self) -> np.ndarray:
        if self.total_tokens == 0:
            return np.zeros(self.num_experts)
        return self.prob_mass / self.total_tokens

    @property
    def dropped_frac(self) -> float:
        return self.dropped_tokens / self.total_tokens if self.total_tokens else 0.0

    def merge(self, other: "RoutingStats") -> "RoutingStats":
        if other.num_experts != self.num_experts:
            raise DimensionError("RoutingStats.merge", self.dispatch_counts.shape, other.dispatch_counts.shape)
        return RoutingStats(
            self.dispatch_counts + other.dispatch_counts,
            self.prob_mass + other.prob_mass,
            self.total_tokens + other.total_tokens,
            self.dropped_tokens + other.dropped_tokens,
        )

    __add__ = merge

    def to_json(self, balance_loss: Optional[float] = None) -> Dict[str, Any]:
        return {
            "f": [float(v) for v in self.f],
            "P": [float(v) for v in self.P],
            "dropped_frac": float(self.dropped_frac),
            "balance_loss": None if balance_loss is None else float(balance_loss),
        }


def gate_probs(x: Tensor, gates: Tensor) -> Tensor:
    """Row-stochastic softmax(x . gates) for tokens x of shape (n, d)."""
    if x.shape[-1] != gates.shape[0]:
        raise DimensionError("gate_probs", x.shape, gates.shape)
    return softmax_rows(x @ gates)


def route_top1(probs, config: RouterConfig):
    """
    Top-1 dispatch with a per-expert quota of ceil(C * n / m), first come first served.

    Returns:
        (assignments, stats): int64 array of expert indices with DROPPED for
        overflowed tokens, and the block's RoutingStats.
    """
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != config.num_experts:
        raise DimensionError("route_top1", p.shape, (None, config.num_experts))
    n, m = p.shape
    if n and np.abs(p.sum(axis=1) - 1.0).max() > STOCHASTIC_TOLERANCE:
        raise ContractError("route_top1 expects row-stochastic gate probabilities")

    # np.argmax returns the first maximum, so ties go to the lowest index
    choice = p.argmax(axis=1).astype(np.int64) if n else np.zeros(0, dtype=np.int64)
    assignments = choice.copy()
    cap = config.capacity(n)
    for k in range(m):
        overflow = np.flatnonzero(choice == k)[cap:]
        assignments[overflow] = DROPPED

    stats = RoutingStats(
        dispatch_counts=np.bincount(choice, minlength=m).astype(np.int64),
        prob_mass=p.sum(axis=0),
        total_tokens=n,
        dropped_tokens=int((assignments == DROPPED).sum()),
    )
    return assignments, stats


def build_hash_table(vocab_size: int, seed: int) -> np.ndarray:
    """Seeded permutation of the vocabulary; frozen at init and stored in checkpoints."""
    return stream(seed, "hash-table", vocab_size).permutation(vocab_size).astype(np.int64)


def route_hash(token_ids, num_experts: int, table: np.ndarray) -> np.ndarray:
    """expert = table[token_id] mod m; never drops."""
    ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= len(table)):
        raise ContractError(f"token id outside the hash table of size {len(table)}")
    return table[ids] % num_experts


def hash_stats(assignments: np.ndarray, num_experts: int) -> RoutingStats:
    counts = np.bincount(assignments, minlength=num_experts).astype(np.int64)
    return RoutingStats(counts, counts.astype(np.float64), int(len(assignments)), 0)


def balance_loss(stats: RoutingStats, probs: Optional[Tensor], config: RouterConfig) -> Tensor:
    """
    alpha * m * sum_j f_j * P_j.

    f comes from the dispatch counts and is a constant; P is the mean gate
    probability of `probs` and carries the gradient to the gate.
    """
    if probs is None or config.algorithm != "gating":
        return Tensor(0.0)
    if stats.total_tokens < 1:
        raise ContractError("balance_loss needs at least one routed token")
    m = config.num_experts
    mean_probs = probs.mean(axis=0)
    return (mean_probs * Tensor(stats.f)).sum() * (config.balance_coeff * m)


@dataclass
class MoeOutput:
    hidden: Tensor
    stats: RoutingStats
    probs: Optional[Tensor]
    assignments: np.ndarray                   # over routed rows, DROPPED for overflow
    routed_rows: np.ndarray                   # flat row indices that were routed
    projections: Optional[MhaOutput] = None   # MHA blocks only
    router: Optional[RouterConfig] = None

    def balance(self) -> Tensor:
        return balance_loss(self.stats, self.probs, self.router)


@dataclass
class _Dispatch:
    probs: Optional[Tensor]
    assignments: np.ndarray
    choice: np.ndarray
    stats: RoutingStats
    rows: np.ndarray
    full: bool = field(default=False)


def _dispatch(flat: Tensor, params: ParamMap, router: RouterConfig,
              token_ids: Optional[np.ndarray], hash_table: Optional[np.ndarray],
              valid: Optional[np.ndarray]) -> _Dispatch:
    total = flat.shape[0]
    valid = np.ones(total, dtype=bool) if valid is None else np.asarray(valid, dtype=bool).reshape(-1)
    rows = np.flatnonzero(valid)
    full = len(rows) == total
    if router.algorithm == "hash":
        if token_ids is None or hash_table is None:
            raise ContractError("hash routing needs token ids and the model's hash table")
        assignments = route_hash(np.asarray(token_ids).reshape(-1)[rows], router.num_experts, hash_table)
        return _Dispatch(None, assignments, assignments, hash_stats(assignments, router.num_experts), rows, full)
    routed_x = flat if full else flat[rows]
    probs = gate_probs(routed_x, params["gate"])
    assignments, stats = route_top1(probs, router)
    choice = probs.data.argmax(axis=1).astype(np.int64)
    return _Dispatch(probs, assignments, choice, stats, rows, full)


def _combine(outputs: Dict[int, Tensor], dispatch: _Dispatch, total: int, width: int,
             select_all: bool) -> Tensor:
    """
    Scale each expert's rows by p_k and place them at their token rows.

    outputs[k] holds rows for exactly the tokens assigned to k, unless
    `select_all` is set, in which case it holds every flat row.
    """
    combined = None
    for k, y in outputs.items():
        sel = np.flatnonzero(dispatch.assignments == k)
        target = dispatch.rows[sel]
        if select_all and not (dispatch.full and len(sel) == total):
            y = y[target]
        if dispatch.probs is not None:
            y = y * dispatch.probs[(sel, np.full(len(sel), k))].reshape(-1, 1)
        if not (dispatch.full and len(sel) == total):
            y = scatter_rows(y, target, total)
        combined = y if combined is None else combined + y
    if combined is None:
        combined = Tensor(np.zeros((total, width)))
    return combined


def moe_ffn_forward(x: Tensor, params: ParamMap, router: RouterConfig,
                    token_ids: Optional[np.ndarray] = None,
                    hash_table: Optional[np.ndarray] = None,
                    valid: Optional[np.ndarray] = None,
                    dropout_rate: float = 0.0,
                    rng: Optional[np.random.Generator] = None) -> MoeOutput:
    """
    Post-LN FFN block whose update is p_k(x_i) * FFN_k(x_i) for the routed expert k.

    Dropped and padding rows get a zero update, so the residual passes them
    through. With one expert taking every row in order, no gather or scatter
    is performed and the result matches the dense block bit for bit.
    """
    d = x.shape[-1]
    flat = x.reshape(-1, d)
    total = flat.shape[0]
    dispatch = _dispatch(flat, params, router, token_ids, hash_table, valid)

    outputs: Dict[int, Tensor] = {}
    for k in range(router.num_experts):
        sel = np.flatnonzero(dispatch.assignments == k)
        if sel.size == 0:
            continue
        expert = subtree(params, f"expert.{k}")
        inputs = flat if (dispatch.full and sel.size == total) else flat[dispatch.rows[sel]]
        outputs[k] = ffn_expert(inputs, expert)

    update = _combine(outputs, dispatch, total, d, select_all=False).reshape(*x.shape)
    hidden = residual_norm(x, update, params, dropout_rate, rng)
    return MoeOutput(hidden, dispatch.stats, dispatch.probs, dispatch.assignments, dispatch.rows, router=router)


def _pick_rows(tensors: List[Tensor], choice: np.ndarray, rows: np.ndarray, total: int) -> Tensor:
    """Row i of the result is row i of tensors[choice[i]] (unrouted rows use expert 0)."""
    owner = np.zeros(total, dtype=np.int64)
    owner[rows] = choice
    combined = None
    for k, t in enumerate(tensors):
        target = np.flatnonzero(owner == k)
        if target.size == 0:
            continue
        part = t if target.size == total else scatter_rows(t[target], target, total)
        combined = part if combined is None else combined + part
    return combined


def moe_mha_forward(x: Tensor, params: ParamMap, router: RouterConfig, num_heads: int,
                    token_ids: Optional[np.ndarray] = None,
                    hash_table: Optional[np.ndarray] = None,
                    key_mask: Optional[np.ndarray] = None,
                    dropout_rate: float = 0.0,
                    rng: Optional[np.random.Generator] = None) -> MoeOutput:
    """
    Post-LN MHA block with whole-block experts and token-level routing.

    Each expert projects keys and values for the whole sequence, but queries,
    attention rows and the output projection run only on the tokens it owns,
    so the active path costs one MHA per token. The update of a routed token
    is scaled by p_k. The Q/K/V projections exposed for relation heads are
    taken per token from its argmax expert (expert 0 for padding rows).
    """
    x3 = x if x.ndim == 3 else x.reshape(1, *x.shape)
    batch, n, d = x3.shape
    flat = x3.reshape(-1, d)
    total = flat.shape[0]
    valid = None if key_mask is None else np.asarray(key_mask, dtype=bool).reshape(-1)
    dispatch = _dispatch(flat, params, router, token_ids, hash_table, valid)

    owner = np.zeros(total, dtype=np.int64)
    owner[dispatch.rows] = dispatch.choice

    if router.num_experts == 1 and dispatch.full and not np.any(dispatch.assignments == DROPPED):
        # one expert owning every row: the dense computation, bit for bit
        out = mha_attention(x3, subtree(params, "expert.0"), num_heads, key_mask, dropout_rate, rng)
        update = _combine({0: out.attended.reshape(total, d)}, dispatch, total, d, select_all=True)
        projections = MhaOutput(attended=Tensor(np.zeros((batch, n, d))), q=out.q, k=out.k, v=out.v)
    else:
        outputs: Dict[int, Tensor] = {}
        q_parts, k_parts, v_parts = [], [], []
        for k in range(router.num_experts):
            expert = subtree(params, f"expert.{k}")
            keys = x3 @ expert["w_k"] + expert["b_k"]
            values = x3 @ expert["w_v"] + expert["b_v"]
            k_parts.append(keys.reshape(total, d))
            v_parts.append(values.reshape(total, d))
            owned = np.flatnonzero(owner == k)
            if owned.size == 0:
                q_parts.append(None)
                continue
            queries = flat[owned] @ expert["w_q"] + expert["b_q"]
            q_parts.append(scatter_rows(queries, owned, total))
            target = dispatch.rows[np.flatnonzero(dispatch.assignments == k)]
            if target.size == 0:
                continue
            local = np.searchsorted(owned, target)
            outputs[k] = attend_rows(queries[local], keys, values, target // n, expert, num_heads,
                                     key_mask, dropout_rate, rng)
        update = _combine(outputs, dispatch, total, d, select_all=False)
        merged_q = None
        for part in q_parts:
            if part is not None:
                merged_q = part if merged_q is None else merged_q + part
        projections = MhaOutput(
            attended=Tensor(np.zeros((batch, n, d))),
            q=merged_q.reshape(batch, n, d),
            k=_pick_rows(k_parts, dispatch.choice, dispatch.rows, total).reshape(batch, n, d),
            v=_pick_rows(v_parts, dispatch.choice, dispatch.rows, total).reshape(batch, n, d),
        )

    hidden = residual_norm(x3, update.reshape(batch, n, d), params, dropout_rate, rng)
    if x.ndim == 2:
        hidden = hidden.reshape(n, d)
    return MoeOutput(hidden, dispatch.stats, dispatch.probs, dispatch.assignments, dispatch.rows,
                     projections=projections, router=router)
