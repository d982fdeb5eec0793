"""First-order optimizers and learning-rate schedules.

Update rules follow the common deep-learning conventions: weight decay is
added to the gradient (L2 coupling) before the momentum / moment updates.
Adam can instead shrink the parameters directly (``decoupled=True``), which
keeps the decay out of the second-moment normalization.
"""

from __future__ import annotations

import math
from typing import Dict, Iterable, List

import numpy as np

from .tensor import Parameter


class Optimizer:
    def __init__(self, params: Iterable[Parameter], lr: float, weight_decay: float = 0.0):
        self.params: List[Parameter] = list(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.state: Dict[int, Dict[str, np.ndarray]] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def _grad(self, p: Parameter, couple: bool = True) -> np.ndarray:
        g = p.grad.astype(np.float64) if p.grad is not None else np.zeros(p.shape)
        if self.weight_decay and couple:
            g = g + self.weight_decay * p.data
        return g

    def step(self) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    """SGD with heavy-ball momentum."""

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        super().__init__(params, lr, weight_decay)
        self.momentum = momentum

    def step(self) -> None:
        if self.lr == 0:
            return
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = self._grad(p)
            st = self.state.setdefault(i, {})
            if self.momentum:
                buf = st.get("momentum")
                buf = g if buf is None else self.momentum * buf + g
                st["momentum"] = buf
                g = buf
            p.data -= (self.lr * g).astype(p.dtype)


class Adam(Optimizer):
    def __init__(
        self,
        params,
        lr: float = 1e-3,
        betas=(0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        decoupled: bool = False,
    ):
        super().__init__(params, lr, weight_decay)
        self.betas = tuple(betas)
        self.eps = eps
        self.decoupled = decoupled

    def step(self) -> None:
        if self.lr == 0:
            return
        b1, b2 = self.betas
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = self._grad(p, couple=not self.decoupled)
            if self.decoupled and self.weight_decay:
                p.data *= p.dtype.type(1.0 - self.lr * self.weight_decay)
            st = self.state.setdefault(i, {"t": 0, "m": np.zeros(p.shape), "v": np.zeros(p.shape)})
            st["t"] += 1
            st["m"] = b1 * st["m"] + (1 - b1) * g
            st["v"] = b2 * st["v"] + (1 - b2) * g * g
            m_hat = st["m"] / (1 - b1 ** st["t"])
            v_hat = st["v"] / (1 - b2 ** st["t"])
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)


def cosine_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    """Cosine decay from ``base_lr`` at epoch 0 towards 0 at ``total_epochs``."""
    if total_epochs <= 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * epoch / total_epochs))


def warmup_cosine_lr(base_lr: float, epoch: int, total_epochs: int, warmup: int = 5) -> float:
    """Linear warmup over ``warmup`` epochs, then cosine decay.

    Epoch ``e < warmup`` uses ``base_lr * (e + 1) / warmup`` so the last
    warmup epoch already runs at the full rate.
    """
    warmup = min(warmup, total_epochs)
    if epoch < warmup:
        return base_lr * (epoch + 1) / warmup
    return cosine_lr(base_lr, epoch - warmup, total_epochs - warmup)
