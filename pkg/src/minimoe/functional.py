"""
Differentiable building blocks used by the encoder, the router and the
distillation losses. All row-wise operations act on the last axis.
"""
from __future__ import annotations

import math
from typing import Optional, Union

import numpy as np
from scipy.special import ndtr

from .errors import ContractError, DimensionError
from .tensor import Function, Tensor

KL_EPSILON = 1e-12
STOCHASTIC_TOLERANCE = 1e-6
LAYER_NORM_EPSILON = 1e-5
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; raises DimensionError naming both shapes on mismatch."""
    return a @ b


class _SoftmaxRows(Function):
    def forward(self, x):
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=-1, keepdims=True)
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - (grad * y).sum(axis=-1, keepdims=True)),)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-stochastic softmax along the last axis (max-subtracted)."""
    return _SoftmaxRows.apply(x)


class _Gelu(Function):
    def forward(self, x):
        self.x = x
        self.cdf = ndtr(x)
        return x * self.cdf

    def backward(self, grad):
        pdf = np.exp(-0.5 * self.x ** 2) * _INV_SQRT_2PI
        return (grad * (self.cdf + self.x * pdf),)


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF."""
    return _Gelu.apply(x)


class _LayerNorm(Function):
    def forward(self, x, gain, bias, eps):
        mean = x.mean(axis=-1, keepdims=True)
        centered = x - mean
        var = (centered ** 2).mean(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.x_hat = centered * self.inv_std
        self.gain = gain
        return self.x_hat * gain + bias

    def backward(self, grad):
        lead = tuple(range(grad.ndim - 1))
        grad_gain = (grad * self.x_hat).sum(axis=lead)
        grad_bias = grad.sum(axis=lead)
        g_hat = grad * self.gain
        grad_x = self.inv_std * (
            g_hat
            - g_hat.mean(axis=-1, keepdims=True)
            - self.x_hat * (g_hat * self.x_hat).mean(axis=-1, keepdims=True)
        )
        return grad_x, grad_gain, grad_bias


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPSILON) -> Tensor:
    """Per-row zero mean / unit (population) variance, then affine."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError("layer_norm", x.shape, gain.shape)
    return _LayerNorm.apply(x, gain, bias, eps=eps)


def _check_stochastic(name: str, rows: np.ndarray) -> None:
    deviation = np.abs(rows.sum(axis=-1) - 1.0)
    if deviation.size and deviation.max() > STOCHASTIC_TOLERANCE:
        raise ContractError(f"{name} is not row-stochastic (max |row sum - 1| = {deviation.max():.3e})")


class _KLDivRows(Function):
    def forward(self, q, p, weights, count):
        self.p, self.q, self.weights, self.count = p, q, weights, count
        log_ratio = np.log(np.maximum(p, KL_EPSILON)) - np.log(np.maximum(q, KL_EPSILON))
        terms = np.where(p > 0, p * log_ratio, 0.0)
        per_row = terms.sum(axis=-1)
        return np.asarray((per_row * weights).sum() / count)

    def backward(self, grad):
        with np.errstate(divide="ignore", invalid="ignore"):
            dq = np.where(self.q > KL_EPSILON, -self.p / np.where(self.q > 0, self.q, 1.0), 0.0)
        dq = dq * (self.weights / self.count)[..., None]
        return (grad * dq,)


def kl_div_rows(p: Union[Tensor, np.ndarray], q: Tensor, row_mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Mean over rows of KL(p_row || q_row). `p` is a detached target.

    Args:
        p: target distributions, any shape (..., m); no gradient flows into it.
        q: predicted distributions with the same shape.
        row_mask: optional boolean array of shape p.shape[:-1]; only True rows
            enter the mean.

    Returns:
        Scalar tensor. Terms with p_ij = 0 contribute 0; q is clamped below by 1e-12.
    """
    p_data = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
    if p_data.shape != q.shape:
        raise DimensionError("kl_div_rows", p_data.shape, q.shape)
    _check_stochastic("p", p_data)
    _check_stochastic("q", q.data)
    if row_mask is None:
        weights = np.ones(p_data.shape[:-1])
    else:
        weights = np.broadcast_to(np.asarray(row_mask, dtype=np.float64), p_data.shape[:-1])
    count = float(weights.sum())
    if count == 0:
        raise ContractError("kl_div_rows needs at least one selected row")
    return _KLDivRows.apply(q, p=p_data, weights=weights, count=count)


class _CrossEntropy(Function):
    def forward(self, logits, targets):
        shifted = logits - logits.max(axis=-1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        log_probs = shifted - log_z
        self.probs = np.exp(log_probs)
        self.targets = targets
        rows = np.arange(len(targets))
        return np.asarray(-log_probs[rows, targets].mean())

    def backward(self, grad):
        d = self.probs.copy()
        d[np.arange(len(self.targets)), self.targets] -= 1.0
        return (grad * d / len(self.targets),)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy of (rows, classes) logits against integer targets."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise DimensionError("cross_entropy", logits.shape, targets.shape)
    if targets.size == 0:
        raise ContractError("cross_entropy needs at least one target")
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise ContractError(f"targets outside [0, {logits.shape[1]})")
    return _CrossEntropy.apply(logits, targets=targets)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity when `rng` is None or `rate` is 0."""
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * Tensor(keep)
