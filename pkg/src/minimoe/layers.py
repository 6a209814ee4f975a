"""
Dense transformer blocks (post-LN, BERT ordering).

Block parameters are plain mappings from short names to tensors:

    MHA:  w_q b_q w_k b_k w_v b_v w_o b_o  (+ norm.gain norm.bias)
    FFN:  w_in b_in w_out b_out            (+ norm.gain norm.bias)

Inputs are (batch, n, d) or (n, d); a 2-D input is treated as one sequence.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Mapping, Optional

import numpy as np

from .errors import ContractError, DimensionError
from .functional import dropout, gelu, layer_norm, softmax_rows
from .tensor import Tensor

ParamMap = Mapping[str, Tensor]

MASK_BIAS = -1e9

MHA_WEIGHTS = ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o")
FFN_WEIGHTS = ("w_in", "b_in", "w_out", "b_out")


def subtree(params: ParamMap, prefix: str) -> Dict[str, Tensor]:
    """Entries under `prefix` with the prefix stripped."""
    if prefix and not prefix.endswith("."):
        prefix += "."
    return {name[len(prefix):]: t for name, t in params.items() if name.startswith(prefix)}


@dataclass
class MhaOutput:
    """Raw block result before residual/norm, plus what relation heads need."""
    attended: Tensor            # (B, n, d), sum over heads after W^O
    q: Tensor                   # (B, n, d) merged head projections
    k: Tensor
    v: Tensor
    attention: Optional[Tensor] = None  # (B, A, n, n)


def _as_batch(x: Tensor):
    if x.ndim == 2:
        return x.reshape(1, *x.shape), True
    if x.ndim != 3:
        raise DimensionError("transformer block input", x.shape, ("B", "n", "d"))
    return x, False


def key_bias(key_mask: Optional[np.ndarray], batch: int, n: int) -> Optional[Tensor]:
    """Additive (B, 1, 1, n) bias that removes padded keys from every softmax row."""
    if key_mask is None:
        return None
    key_mask = np.asarray(key_mask, dtype=bool).reshape(batch, n)
    if key_mask.all():
        return None
    return Tensor(np.where(key_mask, 0.0, MASK_BIAS)[:, None, None, :])


def mha_attention(x: Tensor, params: ParamMap, num_heads: int,
                  key_mask: Optional[np.ndarray] = None,
                  dropout_rate: float = 0.0,
                  rng: Optional[np.random.Generator] = None) -> MhaOutput:
    """
    Sum over heads of softmax(Q_j K_j^T / sqrt(d^A)) V_j W^O_j.

    The per-head sum is computed as one (B, n, d) x (d, d) product over the
    concatenated head contexts, which equals the head-by-head sum.
    """
    x3, _ = _as_batch(x)
    batch, n, d = x3.shape
    if d % num_heads != 0:
        raise DimensionError("mha heads", (d,), (num_heads,))
    head_dim = d // num_heads

    q = x3 @ params["w_q"] + params["b_q"]
    k = x3 @ params["w_k"] + params["b_k"]
    v = x3 @ params["w_v"] + params["b_v"]

    def heads(t: Tensor) -> Tensor:
        return t.reshape(batch, n, num_heads, head_dim).transpose(0, 2, 1, 3)

    scores = (heads(q) @ heads(k).transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(head_dim))
    bias = key_bias(key_mask, batch, n)
    if bias is not None:
        scores = scores + bias
    attention = softmax_rows(scores)
    context = dropout(attention, dropout_rate, rng) @ heads(v)
    merged = context.transpose(0, 2, 1, 3).reshape(batch, n, d)
    attended = merged @ params["w_o"] + params["b_o"]
    return MhaOutput(attended=attended, q=q, k=k, v=v, attention=attention)


def attend_rows(q: Tensor, k: Tensor, v: Tensor, sequence: np.ndarray, params: ParamMap, num_heads: int,
                key_mask: Optional[np.ndarray] = None,
                dropout_rate: float = 0.0,
                rng: Optional[np.random.Generator] = None) -> Tensor:
    """
    Attention output (after W^O) for selected query rows only.

    q is (s, d) already projected; row i attends over the keys and values of
    sequence `sequence[i]` in k, v of shape (B, n, d). Costs s rows of
    attention instead of B * n.
    """
    s, d = q.shape
    batch, n, _ = k.shape
    head_dim = d // num_heads
    sequence = np.asarray(sequence, dtype=np.int64)

    def heads(t: Tensor) -> Tensor:
        return t.reshape(s, n, num_heads, head_dim).transpose(0, 2, 1, 3)

    scores = (q.reshape(s, num_heads, 1, head_dim) @ heads(k[sequence]).transpose(0, 1, 3, 2)) \
        * (1.0 / math.sqrt(head_dim))
    bias = key_bias(key_mask, batch, n)
    if bias is not None:
        scores = scores + Tensor(bias.data[sequence])
    attention = softmax_rows(scores)
    context = dropout(attention, dropout_rate, rng) @ heads(v[sequence])
    return context.reshape(s, d) @ params["w_o"] + params["b_o"]


def residual_norm(x: Tensor, update: Tensor, params: ParamMap,
                  dropout_rate: float = 0.0, rng: Optional[np.random.Generator] = None) -> Tensor:
    """layer_norm(x + dropout(update)) with the block's norm.gain / norm.bias."""
    return layer_norm(x + dropout(update, dropout_rate, rng), params["norm.gain"], params["norm.bias"])


def mha_forward(x: Tensor, params: ParamMap, num_heads: int,
                key_mask: Optional[np.ndarray] = None,
                max_seq_len: Optional[int] = None,
                dropout_rate: float = 0.0,
                rng: Optional[np.random.Generator] = None,
                return_output: bool = False):
    """
    Post-LN multi-head attention block.

    Raises:
        ContractError: the sequence is longer than `max_seq_len`.
    """
    x3, squeezed = _as_batch(x)
    if max_seq_len is not None and x3.shape[1] > max_seq_len:
        raise ContractError(f"sequence length {x3.shape[1]} exceeds max_seq_len {max_seq_len}")
    out = mha_attention(x3, params, num_heads, key_mask, dropout_rate, rng)
    hidden = residual_norm(x3, out.attended, params, dropout_rate, rng)
    if squeezed:
        hidden = hidden.reshape(*hidden.shape[1:])
    return (hidden, out) if return_output else hidden


def ffn_expert(x: Tensor, params: ParamMap) -> Tensor:
    """GELU(x W^I + b^I) W^O + b^O on (rows, d)."""
    return gelu(x @ params["w_in"] + params["b_in"]) @ params["w_out"] + params["b_out"]


def ffn_forward(x: Tensor, params: ParamMap,
                dropout_rate: float = 0.0,
                rng: Optional[np.random.Generator] = None) -> Tensor:
    """Post-LN feed-forward block; rows are flattened so every token sees the same GEMM."""
    d = x.shape[-1]
    update = ffn_expert(x.reshape(-1, d), params).reshape(*x.shape)
    return residual_norm(x, update, params, dropout_rate, rng)
