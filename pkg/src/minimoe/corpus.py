"""
Tokenization, corpus ingestion, masked-LM batching and synthetic
classification tasks.

Vocabulary ids 0..4 are the specials [PAD] [UNK] [CLS] [SEP] [MASK]; content
ids start at FIRST_CONTENT_ID.
"""
from __future__ import annotations

import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import ContractError, ConfigError
from .rng import stream

logger = logging.getLogger(__name__)

SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(len(SPECIAL_TOKENS))
FIRST_CONTENT_ID = len(SPECIAL_TOKENS)
MASK_RATE = 0.15
TASK_KINDS = ("parity", "topic", "pair-match")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def tokenize(text: str) -> List[str]:
    """Lowercased word/punctuation split."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Vocab:
    tokens: List[str]
    index: Dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ContractError("vocabulary must start with the special tokens")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ContractError("vocabulary contains duplicate tokens")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, words: Iterable[str]) -> List[int]:
        return [self.index.get(w, UNK_ID) for w in words]

    def decode(self, ids: Iterable[int]) -> List[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path: Union[str, Path]) -> None:
        """One token per line; line number is the id."""
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines = lines[:-1]
        return cls(lines)


def build_vocab(corpus: Union[str, Sequence[str]], max_size: int) -> Vocab:
    """
    Frequency-ranked word vocabulary with the specials prepended.

    Ties in frequency are ordered alphabetically, so the result depends only
    on the corpus. The total size (specials included) is at most max_size;
    words beyond it encode to [UNK].
    """
    lines = [corpus] if isinstance(corpus, str) else list(corpus)
    counts = Counter(tok for line in lines for tok in tokenize(line))
    if not counts:
        raise ContractError("cannot build a vocabulary from an empty corpus")
    if max_size <= len(SPECIAL_TOKENS):
        raise ConfigError(f"max_size must exceed the {len(SPECIAL_TOKENS)} special tokens")
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    words = [w for w, _ in ranked if w not in SPECIAL_TOKENS][:max_size - len(SPECIAL_TOKENS)]
    logger.info("vocabulary: %d distinct words, kept %d", len(counts), len(words))
    return Vocab(list(SPECIAL_TOKENS) + words)


def read_corpus(path: Union[str, Path]) -> List[str]:
    """UTF-8 text, one document per line; blank lines are skipped."""
    with Path(path).open("r", encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


def encode_windows(lines: Sequence[str], vocab: Vocab, seq_len: int) -> List[np.ndarray]:
    """Token ids per window of at most seq_len - 1 content tokens (room for [CLS])."""
    width = seq_len - 1
    if width < 1:
        raise ContractError("seq_len must leave room for at least one content token")
    windows: List[np.ndarray] = []
    for line in lines:
        ids = vocab.encode(tokenize(line))
        for start in range(0, len(ids), width):
            windows.append(np.asarray(ids[start:start + width], dtype=np.int64))
    return windows


@dataclass
class MlmBatch:
    """
    tokens are the corrupted inputs; mask marks the positions to predict and
    targets holds their original ids in row-major order.
    """
    tokens: np.ndarray      # (B, n) int64
    mask: np.ndarray        # (B, n) bool
    targets: np.ndarray     # (num_masked,) int64
    lengths: np.ndarray     # (B,) real length including [CLS]
    epoch: int = 0

    @property
    def positions(self):
        return np.nonzero(self.mask)


def _mask_rows(rows: np.ndarray, lengths: np.ndarray, vocab_size: int,
               rng: np.random.Generator, mask_rate: float) -> MlmBatch:
    original = rows.copy()
    corrupted = rows.copy()
    mask = np.zeros(rows.shape, dtype=bool)
    for b, length in enumerate(lengths):
        candidates = np.arange(1, length)          # [CLS] at 0, padding after length
        if candidates.size == 0:
            continue
        expected = mask_rate * candidates.size
        count = int(math.floor(expected))
        if rng.random() < expected - count:
            count += 1
        chosen = np.sort(rng.choice(candidates, size=min(count, candidates.size), replace=False))
        mask[b, chosen] = True
    if not mask.any():
        # every batch predicts at least one token
        b = int(np.argmax(lengths > 1))
        if lengths[b] > 1:
            mask[b, int(rng.integers(1, lengths[b]))] = True
    for b, pos in zip(*np.nonzero(mask)):
        u = rng.random()
        if u < 0.8:
            corrupted[b, pos] = MASK_ID
        elif u < 0.9:
            corrupted[b, pos] = rng.integers(FIRST_CONTENT_ID, vocab_size)
    return MlmBatch(corrupted, mask, original[mask], lengths.copy())


def pack_rows(windows: Sequence[np.ndarray], seq_len: int) -> Tuple[np.ndarray, np.ndarray]:
    """[CLS] + window, right-padded with [PAD]."""
    rows = np.full((len(windows), seq_len), PAD_ID, dtype=np.int64)
    lengths = np.zeros(len(windows), dtype=np.int64)
    for i, window in enumerate(windows):
        if len(window) > seq_len - 1:
            raise ContractError(f"window of {len(window)} tokens does not fit seq_len {seq_len}")
        rows[i, 0] = CLS_ID
        rows[i, 1:1 + len(window)] = window
        lengths[i] = 1 + len(window)
    return rows, lengths


@dataclass
class WindowBatch:
    """Unmasked [CLS]-prefixed rows, as fed to teacher and student during distillation."""
    tokens: np.ndarray      # (B, n) int64
    lengths: np.ndarray     # (B,)
    epoch: int = 0


def _shuffled_rows(windows: Sequence[np.ndarray], seq_len: int, batch_size: int, seed: int,
                   max_seq_len: int, epochs: Optional[int], purpose: str
                   ) -> Iterator[Tuple[int, np.ndarray, np.ndarray]]:
    if seq_len > max_seq_len:
        raise ContractError(f"seq_len {seq_len} exceeds max_seq_len {max_seq_len}")
    if len(windows) < batch_size:
        raise ContractError(f"corpus yields {len(windows)} windows, fewer than one batch of {batch_size}")
    epoch = 0
    while epochs is None or epoch < epochs:
        order = stream(seed, purpose, "shuffle", epoch).permutation(len(windows))
        for start in range(0, len(order) - batch_size + 1, batch_size):
            rows, lengths = pack_rows([windows[i] for i in order[start:start + batch_size]], seq_len)
            yield epoch, rows, lengths
        epoch += 1


def make_mlm_batches(windows: Sequence[np.ndarray], vocab_size: int, seq_len: int, batch_size: int,
                     seed: int, max_seq_len: int = 128, epochs: Optional[int] = 1,
                     mask_rate: float = MASK_RATE, purpose: str = "mlm") -> Iterator[MlmBatch]:
    """
    Shuffled, masked batches over `windows`.

    Each epoch reshuffles with its own named stream; incomplete trailing
    batches are dropped so every batch has shape (batch_size, seq_len).
    epochs=None repeats forever. The stream is a pure function of
    (windows, seed, purpose).

    Raises:
        ContractError: seq_len exceeds max_seq_len, or fewer windows than one batch.
    """
    mask_rng, current = None, None
    for epoch, rows, lengths in _shuffled_rows(windows, seq_len, batch_size, seed, max_seq_len, epochs, purpose):
        if epoch != current:
            mask_rng, current = stream(seed, purpose, "mask", epoch), epoch
        batch = _mask_rows(rows, lengths, vocab_size, mask_rng, mask_rate)
        batch.epoch = epoch
        yield batch


def make_window_batches(windows: Sequence[np.ndarray], seq_len: int, batch_size: int, seed: int,
                        max_seq_len: int = 128, epochs: Optional[int] = None,
                        purpose: str = "distill") -> Iterator[WindowBatch]:
    """Same shuffling as `make_mlm_batches`, without corruption."""
    for epoch, rows, lengths in _shuffled_rows(windows, seq_len, batch_size, seed, max_seq_len, epochs, purpose):
        yield WindowBatch(rows, lengths, epoch)


def batches_per_epoch(num_windows: int, batch_size: int) -> int:
    return num_windows // batch_size


# ============ synthetic downstream tasks ============

@dataclass
class TaskDataset:
    """Padded classification examples; pair tasks carry segment ids."""
    kind: str
    tokens: np.ndarray      # (N, n) int64
    lengths: np.ndarray     # (N,)
    type_ids: np.ndarray    # (N, n)
    labels: np.ndarray      # (N,)
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index: np.ndarray) -> "TaskDataset":
        return TaskDataset(self.kind, self.tokens[index], self.lengths[index], self.type_ids[index],
                           self.labels[index], self.num_classes)

    def split(self, dev_fraction: float, seed: int) -> Tuple["TaskDataset", "TaskDataset"]:
        order = stream(seed, "task-split", self.kind).permutation(len(self))
        cut = max(1, int(round(len(self) * (1.0 - dev_fraction))))
        return self.subset(np.sort(order[:cut])), self.subset(np.sort(order[cut:]))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "tokens": [row[:length].tolist() for row, length in zip(self.tokens, self.lengths)],
            "type_ids": [row[:length].tolist() for row, length in zip(self.type_ids, self.lengths)],
            "label": self.labels.astype(int),
        })

    def save(self, path: Union[str, Path]) -> None:
        """JSONL, one {"tokens", "type_ids", "label"} record per line."""
        frame = self.to_frame()
        frame.insert(0, "kind", self.kind)
        frame["num_classes"] = self.num_classes
        frame.to_json(path, orient="records", lines=True)

    @classmethod
    def load(cls, path: Union[str, Path], seq_len: Optional[int] = None) -> "TaskDataset":
        frame = pd.read_json(path, orient="records", lines=True)
        if frame.empty:
            raise ContractError(f"{path} holds no examples")
        width = seq_len or int(frame["tokens"].map(len).max())
        tokens, lengths = pack_padded(list(frame["tokens"]), width)
        type_ids = list(frame["type_ids"]) if "type_ids" in frame else [[0] * len(t) for t in frame["tokens"]]
        types, _ = pack_padded(type_ids, width)
        labels = frame["label"].to_numpy(dtype=np.int64)
        kind = str(frame["kind"].iloc[0]) if "kind" in frame else "custom"
        num_classes = int(frame["num_classes"].iloc[0]) if "num_classes" in frame else int(labels.max()) + 1
        return cls(kind, tokens, lengths, types, labels, num_classes)


def pack_padded(sequences: Sequence[Sequence[int]], width: int) -> Tuple[np.ndarray, np.ndarray]:
    out = np.full((len(sequences), width), PAD_ID, dtype=np.int64)
    lengths = np.zeros(len(sequences), dtype=np.int64)
    for i, seq in enumerate(sequences):
        if len(seq) > width:
            raise ContractError(f"example of length {len(seq)} exceeds width {width}")
        out[i, :len(seq)] = seq
        lengths[i] = len(seq)
    return out, lengths


def token_cluster(token_id: Union[int, np.ndarray], vocab_size: int, num_clusters: int):
    """Contiguous id clusters over the content range."""
    span = vocab_size - FIRST_CONTENT_ID
    return (np.asarray(token_id) - FIRST_CONTENT_ID) * num_clusters // span


def _cluster_range(cluster: int, vocab_size: int, num_clusters: int) -> Tuple[int, int]:
    span = vocab_size - FIRST_CONTENT_ID
    lo = FIRST_CONTENT_ID + -(-cluster * span // num_clusters)
    hi = FIRST_CONTENT_ID + -(-(cluster + 1) * span // num_clusters)
    return lo, hi


def rule_label(kind: str, tokens: Sequence[int], type_ids: Sequence[int], vocab_size: int,
               num_clusters: int = 4) -> int:
    """Label of one example recomputed from its tokens."""
    ids = np.asarray(tokens, dtype=np.int64)
    content = ids[ids >= FIRST_CONTENT_ID]
    if kind == "parity":
        return int((content == FIRST_CONTENT_ID).sum() % 2)
    if kind == "topic":
        counts = np.bincount(token_cluster(content, vocab_size, num_clusters), minlength=num_clusters)
        return int(counts.argmax())
    if kind == "pair-match":
        types = np.asarray(type_ids, dtype=np.int64)
        first = ids[(types == 0) & (ids >= FIRST_CONTENT_ID)]
        second = ids[(types == 1) & (ids >= FIRST_CONTENT_ID)]
        return int(token_cluster(first[0], vocab_size, num_clusters) == token_cluster(second[0], vocab_size, num_clusters))
    raise ConfigError(f"unknown task kind {kind!r}")


def make_synthetic_task(kind: str, size: int, seed: int, vocab_size: int = 8000, seq_len: int = 32,
                        num_clusters: int = 4) -> TaskDataset:
    """
    Deterministic labeled dataset.

    parity:     label = count of the marker token (FIRST_CONTENT_ID) mod 2.
    topic:      label = the cluster most tokens are drawn from (num_clusters classes).
    pair-match: [CLS] a [SEP] b [SEP]; label = 1 when a and b come from the same cluster.

    Labels are drawn first (balanced up to one example), then an example is
    built to carry that label.
    """
    if kind not in TASK_KINDS:
        raise ConfigError(f"unknown task kind {kind!r}; expected one of {TASK_KINDS}")
    if size < 1:
        raise ContractError("size must be >= 1")
    if seq_len < 6 or vocab_size < FIRST_CONTENT_ID + 2 * num_clusters:
        raise ConfigError("seq_len >= 6 and a vocabulary of at least two ids per cluster are required")
    rng = stream(seed, "task", kind, size)
    num_classes = num_clusters if kind == "topic" else 2
    labels = rng.permutation(np.arange(size) % num_classes).astype(np.int64)

    sequences, segment_ids = [], []
    for label in labels:
        if kind == "parity":
            seq, types = _parity_example(int(label), rng, vocab_size, seq_len)
        elif kind == "topic":
            seq, types = _topic_example(int(label), rng, vocab_size, seq_len, num_clusters)
        else:
            seq, types = _pair_example(int(label), rng, vocab_size, seq_len, num_clusters)
        sequences.append(seq)
        segment_ids.append(types)
    tokens, lengths = pack_padded(sequences, seq_len)
    types, _ = pack_padded(segment_ids, seq_len)
    return TaskDataset(kind, tokens, lengths, types, labels, num_classes)


def _parity_example(label: int, rng: np.random.Generator, vocab_size: int, seq_len: int):
    length = int(rng.integers(seq_len // 2, seq_len))       # content tokens, room for [CLS]
    choices = [c for c in range(0, min(length, 6) + 1) if c % 2 == label]
    markers = int(rng.choice(choices))
    body = rng.integers(FIRST_CONTENT_ID + 1, vocab_size, size=length)
    body[rng.choice(length, size=markers, replace=False)] = FIRST_CONTENT_ID
    seq = [CLS_ID] + body.tolist()
    return seq, [0] * len(seq)


def _topic_example(label: int, rng: np.random.Generator, vocab_size: int, seq_len: int, num_clusters: int):
    length = int(rng.integers(seq_len // 2, seq_len))
    dominant = int(math.ceil(0.6 * length))
    lo, hi = _cluster_range(label, vocab_size, num_clusters)
    body = list(rng.integers(lo, hi, size=dominant))
    others = [c for c in range(num_clusters) if c != label]
    for _ in range(length - dominant):
        olo, ohi = _cluster_range(int(rng.choice(others)), vocab_size, num_clusters)
        body.append(int(rng.integers(olo, ohi)))
    body = rng.permutation(np.asarray(body, dtype=np.int64))
    seq = [CLS_ID] + body.tolist()
    return seq, [0] * len(seq)


def _pair_example(label: int, rng: np.random.Generator, vocab_size: int, seq_len: int, num_clusters: int):
    half = (seq_len - 3) // 2
    len_a = int(rng.integers(max(1, half // 2), half + 1))
    len_b = int(rng.integers(max(1, half // 2), half + 1))
    cluster_a = int(rng.integers(num_clusters))
    if label == 1:
        cluster_b = cluster_a
    else:
        cluster_b = int(rng.choice([c for c in range(num_clusters) if c != cluster_a]))
    a_lo, a_hi = _cluster_range(cluster_a, vocab_size, num_clusters)
    b_lo, b_hi = _cluster_range(cluster_b, vocab_size, num_clusters)
    seg_a = rng.integers(a_lo, a_hi, size=len_a).tolist()
    seg_b = rng.integers(b_lo, b_hi, size=len_b).tolist()
    seq = [CLS_ID] + seg_a + [SEP_ID] + seg_b + [SEP_ID]
    types = [0] * (len_a + 2) + [1] * (len_b + 1)
    return seq, types
