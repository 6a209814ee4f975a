"""
Encoder model: embeddings, L blocks of (MHA, FFN), optional auxiliary MHA,
tied masked-LM head.

Parameters live in one flat, insertion-ordered dict keyed by path strings:

    embeddings.token  embeddings.position  embeddings.type  embeddings.norm.{gain,bias}
    layer.{l}.mha.{w_q,...}                  dense MHA
    layer.{l}.mha.expert.{k}.{w_q,...}       routed MHA (+ layer.{l}.mha.gate)
    layer.{l}.ffn.{w_in,...}                 dense FFN
    layer.{l}.ffn.expert.{k}.{w_in,...}      routed FFN (+ layer.{l}.ffn.gate)
    layer.{l}.{mha,ffn}.norm.{gain,bias}
    aux_mha.*    pooler.{w,b}    mlm.bias
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .config import ModelConfig
from .errors import ContractError
from .functional import cross_entropy, dropout, layer_norm
from .layers import MhaOutput, ffn_forward, mha_forward, subtree
from .moe import RoutingStats, build_hash_table, moe_ffn_forward, moe_mha_forward
from .rng import stream
from .tensor import Tensor

logger = logging.getLogger(__name__)

INIT_STD = 0.02


def _mha_shapes(d: int) -> Dict[str, Tuple[int, ...]]:
    return {"w_q": (d, d), "b_q": (d,), "w_k": (d, d), "b_k": (d,),
            "w_v": (d, d), "b_v": (d,), "w_o": (d, d), "b_o": (d,)}


def _ffn_shapes(d: int, d_ffn: int) -> Dict[str, Tuple[int, ...]]:
    return {"w_in": (d, d_ffn), "b_in": (d_ffn,), "w_out": (d_ffn, d), "b_out": (d,)}


def _block_shapes(prefix: str, shapes: Dict[str, Tuple[int, ...]], num_experts: int, d: int
                  ) -> Iterator[Tuple[str, Tuple[int, ...]]]:
    if num_experts == 1:
        for name, shape in shapes.items():
            yield f"{prefix}.{name}", shape
    else:
        for k in range(num_experts):
            for name, shape in shapes.items():
                yield f"{prefix}.expert.{k}.{name}", shape
        yield f"{prefix}.gate", (d, num_experts)
    yield f"{prefix}.norm.gain", (d,)
    yield f"{prefix}.norm.bias", (d,)


def param_shapes(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Every parameter path and shape of a model, in initialization order."""
    d = config.hidden
    out: List[Tuple[str, Tuple[int, ...]]] = [
        ("embeddings.token", (config.vocab_size, d)),
        ("embeddings.position", (config.max_seq_len, d)),
        ("embeddings.type", (config.type_vocab_size, d)),
        ("embeddings.norm.gain", (d,)),
        ("embeddings.norm.bias", (d,)),
    ]
    for layer in range(config.num_layers):
        out.extend(_block_shapes(f"layer.{layer}.mha", _mha_shapes(d), config.m_mha, d))
        out.extend(_block_shapes(f"layer.{layer}.ffn", _ffn_shapes(d, config.ffn_dim), config.m_ffn, d))
    if config.has_aux_mha:
        out.extend(_block_shapes("aux_mha", _mha_shapes(d), 1, d))
    if config.has_pooler:
        out.extend([("pooler.w", (d, d)), ("pooler.b", (d,))])
    out.append(("mlm.bias", (config.vocab_size,)))
    return out


def _initial_value(name: str, shape: Tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "gain":
        return np.ones(shape)
    if len(shape) == 1:
        return np.zeros(shape)
    return rng.normal(0.0, INIT_STD, size=shape)


def is_no_decay(name: str) -> bool:
    """Biases and norm parameters are excluded from weight decay."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf in ("gain", "bias", "b") or leaf.startswith("b_")


@dataclass
class EncoderOutput:
    hidden: Tensor                              # (B, n, d) or (n, d)
    final_qkv: Tuple[Tensor, Tensor, Tensor]    # projections of the last (aux if present) MHA
    key_mask: np.ndarray                        # (B, n) True for real tokens
    routing: Dict[str, RoutingStats] = field(default_factory=dict)
    balance_loss: Tensor = field(default_factory=lambda: Tensor(0.0))

    def routing_by_kind(self) -> Dict[str, RoutingStats]:
        """Routed blocks merged per kind ("mha", "ffn"); each kind has one expert count."""
        merged: Dict[str, RoutingStats] = {}
        for name, stats in self.routing.items():
            kind = name.rsplit(".", 1)[-1]
            merged[kind] = stats if kind not in merged else merged[kind] + stats
        return merged

    def routing_summary(self, kind: Optional[str] = None) -> Optional[RoutingStats]:
        """Stats of one block kind; by default the FFN experts, else the MHA experts."""
        by_kind = self.routing_by_kind()
        if kind is not None:
            return by_kind.get(kind)
        return by_kind.get("ffn", by_kind.get("mha"))


class EncoderModel:
    """Parameters plus config; forward passes are the module-level `encode` / `mlm_loss`."""

    def __init__(self, config: ModelConfig, params: Dict[str, Tensor],
                 hash_table: Optional[np.ndarray] = None):
        self.config = config
        self.params = params
        self.hash_table = hash_table
        if config.is_moe and config.routing == "hash" and hash_table is None:
            raise ContractError("hash-routed model needs a hash table")

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0,
                   rng: Optional[np.random.Generator] = None) -> "EncoderModel":
        """Random init: N(0, 0.02) weights and embeddings, zero biases, unit norm gains."""
        rng = rng if rng is not None else stream(seed, "init", config.config_hash())
        params = {name: Tensor(_initial_value(name, shape, rng), requires_grad=True)
                  for name, shape in param_shapes(config)}
        table = None
        if config.is_moe and config.routing == "hash":
            table = build_hash_table(config.vocab_size, config.hash_seed)
        return cls(config, params, table)

    # --------- parameters ---------

    def parameters(self) -> List[Tuple[str, Tensor]]:
        return list(self.params.items())

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def requires_grad_(self, flag: bool = True) -> "EncoderModel":
        for t in self.params.values():
            t.requires_grad = flag
        return self

    def copy(self) -> "EncoderModel":
        params = {name: Tensor(t.data.copy(), requires_grad=t.requires_grad) for name, t in self.params.items()}
        table = None if self.hash_table is None else self.hash_table.copy()
        return EncoderModel(self.config, params, table)

    def without_aux(self) -> "EncoderModel":
        """Finetuning form: the auxiliary MHA carries no task parameters and is dropped."""
        if not self.config.has_aux_mha:
            return self
        params = {name: t for name, t in self.params.items() if not name.startswith("aux_mha.")}
        return EncoderModel(replace(self.config, has_aux_mha=False), params, self.hash_table)

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, t in self.params.items():
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        if self.hash_table is not None:
            digest.update(np.ascontiguousarray(self.hash_table, dtype="<i8").tobytes())
        return digest.hexdigest()

    def __deepcopy__(self, memo):
        return self.copy()

    def __repr__(self) -> str:
        return f"EncoderModel({self.config.label}, params={self.num_parameters():,})"


def _check_tokens(tokens: np.ndarray, config: ModelConfig) -> None:
    if tokens.ndim != 2:
        raise ContractError(f"tokens must be (n,) or (batch, n), got shape {tokens.shape}")
    if tokens.shape[1] > config.max_seq_len:
        raise ContractError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {config.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        bad = int(tokens.max() if tokens.max() >= config.vocab_size else tokens.min())
        raise ContractError(f"token id {bad} outside vocabulary of size {config.vocab_size}")


def _key_mask(shape: Tuple[int, int], lengths: Optional[np.ndarray]) -> np.ndarray:
    batch, n = shape
    if lengths is None:
        return np.ones((batch, n), dtype=bool)
    lengths = np.asarray(lengths, dtype=np.int64).reshape(batch)
    if lengths.min() < 1 or lengths.max() > n:
        raise ContractError(f"lengths must lie in [1, {n}]")
    return np.arange(n)[None, :] < lengths[:, None]


def embed(tokens: np.ndarray, model: EncoderModel, type_ids: Optional[np.ndarray] = None,
          rng: Optional[np.random.Generator] = None) -> Tensor:
    p = model.params
    batch, n = tokens.shape
    type_ids = np.zeros_like(tokens) if type_ids is None else np.asarray(type_ids, dtype=np.int64).reshape(batch, n)
    if type_ids.size and (type_ids.min() < 0 or type_ids.max() >= model.config.type_vocab_size):
        raise ContractError(f"type ids outside [0, {model.config.type_vocab_size})")
    x = p["embeddings.token"][tokens] + p["embeddings.position"][:n] + p["embeddings.type"][type_ids]
    x = layer_norm(x, p["embeddings.norm.gain"], p["embeddings.norm.bias"])
    return dropout(x, model.config.dropout, rng)


def encode(tokens, model: EncoderModel, lengths: Optional[np.ndarray] = None,
           type_ids: Optional[np.ndarray] = None,
           rng: Optional[np.random.Generator] = None) -> EncoderOutput:
    """
    Run the encoder.

    Args:
        tokens: int ids of shape (n,) or (batch, n).
        lengths: optional real length per row; later positions are padding,
            masked as attention keys and never routed.
        type_ids: optional segment ids, same shape as tokens.
        rng: dropout generator; None runs in evaluation mode.

    Returns:
        EncoderOutput whose hidden/final_qkv drop the batch axis for 1-D input.

    Raises:
        ContractError: out-of-vocabulary ids or a sequence longer than max_seq_len.
    """
    config = model.config
    ids = np.asarray(tokens, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids.reshape(1, -1)
    _check_tokens(ids, config)
    key_mask = _key_mask(ids.shape, lengths)
    p = model.params
    rate = config.dropout if rng is not None else 0.0

    x = embed(ids, model, type_ids, rng)
    last: Optional[MhaOutput] = None
    routing: Dict[str, RoutingStats] = {}
    balance = Tensor(0.0)

    for layer in range(config.num_layers):
        prefix = f"layer.{layer}.mha"
        block = subtree(p, prefix)
        if config.m_mha == 1:
            x, last = mha_forward(x, block, config.num_heads, key_mask, config.max_seq_len, rate, rng,
                                  return_output=True)
        else:
            out = moe_mha_forward(x, block, config.router_for(config.m_mha), config.num_heads,
                                  ids, model.hash_table, key_mask, rate, rng)
            x, last = out.hidden, out.projections
            routing[prefix] = out.stats
            balance = balance + out.balance()

        prefix = f"layer.{layer}.ffn"
        block = subtree(p, prefix)
        if config.m_ffn == 1:
            x = ffn_forward(x, block, rate, rng)
        else:
            out = moe_ffn_forward(x, block, config.router_for(config.m_ffn), ids, model.hash_table,
                                  key_mask, rate, rng)
            x = out.hidden
            routing[prefix] = out.stats
            balance = balance + out.balance()

    if config.has_aux_mha:
        x, last = mha_forward(x, subtree(p, "aux_mha"), config.num_heads, key_mask, config.max_seq_len,
                              rate, rng, return_output=True)

    if last is None:
        # empty stack: relations fall back to the normalized embeddings
        qkv = (x, x, x)
    else:
        qkv = (last.q, last.k, last.v)
    if single:
        x = x.reshape(*x.shape[1:])
        qkv = tuple(t.reshape(*t.shape[1:]) for t in qkv)
    return EncoderOutput(hidden=x, final_qkv=qkv, key_mask=key_mask, routing=routing, balance_loss=balance)


def pooled(hidden: Tensor, model: EncoderModel) -> Tensor:
    """First-token state, through the tanh pooler when the model has one."""
    cls_state = hidden[:, 0] if hidden.ndim == 3 else hidden[0:1]
    if model.config.has_pooler:
        cls_state = (cls_state @ model.params["pooler.w"] + model.params["pooler.b"]).tanh()
    return cls_state


def mlm_logits(hidden_rows: Tensor, model: EncoderModel) -> Tensor:
    """Tied output layer: rows . E_token^T + mlm.bias."""
    return hidden_rows @ model.params["embeddings.token"].T + model.params["mlm.bias"]


def mlm_loss(tokens, mask_positions, model: EncoderModel,
             targets: Optional[np.ndarray] = None,
             lengths: Optional[np.ndarray] = None,
             rng: Optional[np.random.Generator] = None,
             return_output: bool = False):
    """
    Mean cross-entropy at the masked positions.

    Args:
        tokens: model inputs (already corrupted by the 80/10/10 rule).
        mask_positions: boolean mask of tokens' shape, or (rows, cols) index arrays.
        targets: original ids at the masked positions; defaults to the input ids there.

    Raises:
        ContractError: no masked position.
    """
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids.reshape(1, -1)
        if isinstance(mask_positions, np.ndarray) and mask_positions.dtype == bool:
            mask_positions = mask_positions.reshape(1, -1)
    if isinstance(mask_positions, np.ndarray) and mask_positions.dtype == bool:
        rows, cols = np.nonzero(mask_positions.reshape(ids.shape))
    else:
        rows, cols = (np.asarray(a, dtype=np.int64) for a in mask_positions)
    if len(rows) == 0:
        raise ContractError("mlm_loss needs at least one masked position")
    targets = ids[rows, cols] if targets is None else np.asarray(targets, dtype=np.int64).reshape(-1)

    out = encode(ids, model, lengths=lengths, rng=rng)
    logits = mlm_logits(out.hidden[(rows, cols)], model)
    loss = cross_entropy(logits, targets)
    return (loss, out) if return_output else loss

