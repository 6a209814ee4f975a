"""AdamW with decoupled weight decay, global-norm clipping and a linear warmup/decay schedule."""
from __future__ import annotations

import math
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError
from .tensor import Tensor

NamedParams = Sequence[Tuple[str, Tensor]]


def linear_schedule(base_lr: float, total_steps: int, warmup_proportion: float) -> Callable[[int], float]:
    """
    lr(step) ramps linearly to base_lr over the warmup steps, then decays linearly to 0.

    `step` is 0-based; the first update uses (0 + 1) / warmup of the base rate.
    """
    if total_steps < 0 or not 0.0 <= warmup_proportion <= 1.0:
        raise ConfigError("total_steps >= 0 and warmup_proportion in [0, 1] are required")
    warmup = max(1, int(math.ceil(warmup_proportion * total_steps))) if warmup_proportion > 0 else 0

    def lr_at(step: int) -> float:
        if warmup and step < warmup:
            return base_lr * (step + 1) / warmup
        remaining = max(total_steps - warmup, 1)
        return base_lr * max(0.0, (total_steps - step) / remaining)

    return lr_at


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most max_norm; returns the norm before."""
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


class AdamW:
    """
    Adam with decoupled weight decay.

    Parameters for which `no_decay(name)` holds are never decayed. A step with
    lr == 0 leaves every parameter bit-for-bit unchanged and does not
    advance the step count or the moment estimates.
    """

    def __init__(self, params: NamedParams, lr: float = 3e-4, betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-6, weight_decay: float = 0.01,
                 no_decay: Optional[Callable[[str], bool]] = None,
                 max_grad_norm: Optional[float] = 1.0):
        self.params: List[Tuple[str, Tensor]] = [(n, p) for n, p in params if p.requires_grad]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = no_decay or (lambda name: False)
        self.max_grad_norm = max_grad_norm
        self.step_count = 0
        self.m: Dict[str, np.ndarray] = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v: Dict[str, np.ndarray] = {n: np.zeros_like(p.data) for n, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def step(self, lr: Optional[float] = None) -> float:
        """Apply one update; returns the pre-clipping gradient norm."""
        lr = self.lr if lr is None else lr
        tensors = [p for _, p in self.params]
        norm = clip_grad_norm(tensors, self.max_grad_norm) if self.max_grad_norm else 0.0
        if lr == 0.0:
            return norm
        self.step_count += 1
        bias1 = 1.0 - self.beta1 ** self.step_count
        bias2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params:
            if p.grad is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad ** 2
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            if self.weight_decay and not self.no_decay(name):
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update
        return norm
