"""
Singular-value diagnostics of weight matrices and the low-rank
checkpoint transform.

Counts are taken on singular values normalized by the largest one, at
thresholds 0.2 / 0.1 / 0.05, and rendered as "k/q = p%".
"""
from __future__ import annotations

import fnmatch
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Sequence, Tuple, Union

import numpy as np

from .compute import tally_params
from .errors import ConfigError, SelectorError
from .model import EncoderModel
from .tensor import Tensor

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.2, 0.1, 0.05)
TRUNCATION_RULE = "per matrix: keep singular values whose normalized value exceeds the threshold"


def svd_values(matrix: Union[Tensor, np.ndarray]) -> np.ndarray:
    """
    Descending singular values via the symmetric eigen-solve of the smaller
    Gram matrix (A^T A or A A^T).
    """
    a = matrix.data if isinstance(matrix, Tensor) else np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2 or min(a.shape) < 1:
        raise ConfigError(f"svd_values needs a non-empty 2-D matrix, got shape {a.shape}")
    gram = a.T @ a if a.shape[1] <= a.shape[0] else a @ a.T
    eigenvalues = np.linalg.eigvalsh(gram)
    return np.sqrt(np.clip(eigenvalues, 0.0, None))[::-1].copy()


@dataclass
class SpectrumReport:
    path: str
    singular_values: np.ndarray
    thresholds: Tuple[float, ...] = DEFAULT_THRESHOLDS
    normalized: np.ndarray = field(init=False)
    counts: Dict[float, int] = field(init=False)

    def __post_init__(self):
        top = self.singular_values[0] if len(self.singular_values) else 0.0
        self.normalized = self.singular_values / top if top > 0 else np.zeros_like(self.singular_values)
        self.counts = {t: int((self.normalized > t).sum()) for t in self.thresholds}

    @property
    def width(self) -> int:
        return len(self.singular_values)

    def formatted(self, threshold: float) -> str:
        k = self.counts[threshold]
        return f"{k}/{self.width} = {round(100.0 * k / self.width)}%"

    def to_json(self) -> Dict[str, Any]:
        return {
            "path": self.path,
            "singular_values": [float(s) for s in self.singular_values],
            "counts": {str(t): c for t, c in self.counts.items()},
            "formatted": {str(t): self.formatted(t) for t in self.thresholds},
        }


def select_matrices(model: EncoderModel, selector: str) -> List[Tuple[str, Tensor]]:
    """
    2-D parameters whose path matches the glob `selector`.

    The selector may match anywhere after a dot boundary ("ffn.*.w_out"
    selects "layer.2.ffn.expert.1.w_out"), and a ".*." segment may also match
    a single dot (so "ffn.*.w_out" selects "layer.2.ffn.w_out" too).

    Raises:
        SelectorError: nothing matched.
    """
    patterns = {selector, "*." + selector}
    if ".*." in selector:
        collapsed = selector.replace(".*.", ".")
        patterns |= {collapsed, "*." + collapsed}
    chosen = [(name, t) for name, t in model.parameters()
              if t.ndim == 2 and any(fnmatch.fnmatchcase(name, p) for p in patterns)]
    if not chosen:
        raise SelectorError(f"selector {selector!r} matched no weight matrix")
    return chosen


def spectrum_report(model: EncoderModel, selector: str,
                    thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> List[SpectrumReport]:
    thresholds = tuple(sorted(thresholds, reverse=True))
    return [SpectrumReport(name, svd_values(t), thresholds) for name, t in select_matrices(model, selector)]


@dataclass
class FactorEntry:
    path: str
    shape: Tuple[int, int]
    rank: int
    params_before: int
    params_after: int
    relative_error: float
    factored: bool


@dataclass
class FactorizationReport:
    threshold: float
    entries: List[FactorEntry]
    transformer_params_before: int
    transformer_params_after: int
    rule: str = TRUNCATION_RULE

    def to_json(self) -> Dict[str, Any]:
        return {
            "schema": "v1",
            "threshold": self.threshold,
            "rule": self.rule,
            "transformer_params_before": self.transformer_params_before,
            "transformer_params_after": self.transformer_params_after,
            "entries": [vars(e) | {"shape": list(e.shape)} for e in self.entries],
        }


def factorize(model: EncoderModel, selector: str, threshold: float = 0.1
              ) -> Tuple[Dict[str, Tuple[np.ndarray, np.ndarray]], FactorizationReport]:
    """
    Truncate each selected matrix to the singular values above `threshold`
    (normalized) and return {path: (U_r S_r, V_r^T)} for `save_checkpoint`.

    A matrix is only stored factored when r (p + q) < p q; otherwise it stays
    dense and its entry reports factored=False.
    """
    factors: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
    entries: List[FactorEntry] = []
    saved = 0
    for name, tensor in select_matrices(model, selector):
        a = tensor.data
        u, s, vt = np.linalg.svd(a, full_matrices=False)
        normalized = s / s[0] if s[0] > 0 else np.zeros_like(s)
        rank = max(1, int((normalized > threshold).sum()))
        p, q = a.shape
        after = rank * (p + q)
        if after < p * q:
            left, right = u[:, :rank] * s[:rank], vt[:rank]
            error = float(np.linalg.norm(a - left @ right) / max(np.linalg.norm(a), 1e-300))
            factors[name] = (left, right)
            if name.startswith(("layer.", "aux_mha.")):
                saved += p * q - after
            entries.append(FactorEntry(name, (p, q), rank, p * q, after, error, True))
        else:
            entries.append(FactorEntry(name, (p, q), rank, p * q, p * q, 0.0, False))
    before = tally_params(model).params_transformer
    report = FactorizationReport(threshold, entries, before, before - saved)
    logger.info("factorized %d/%d matrices: transformer params %d -> %d",
                len(factors), len(entries), before, before - saved)
    return factors, report
