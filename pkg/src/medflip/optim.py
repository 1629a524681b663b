"""Adam with decoupled weight decay."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class AdamW:
    def __init__(self, params: list[Tensor], lr: float = 3e-4, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01, decay_mask: list[bool] | None = None):
        if lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {lr}")
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        # by default only matrices decay; biases, norms and 1-d vectors do not
        self.decay_mask = decay_mask if decay_mask is not None else [p.data.ndim >= 2 for p in params]
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.step_count = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, m, v, decay in zip(self.params, self.m, self.v, self.decay_mask):
            g = p.grad
            if g is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if decay and self.weight_decay:
                update = update + self.weight_decay * p.data
            if self.lr:
                p.data = p.data - self.lr * update

    def state(self) -> dict[str, np.ndarray]:
        return {"step": np.array(self.step_count, dtype=np.float64),
                **{f"m.{i}": m for i, m in enumerate(self.m)},
                **{f"v.{i}": v for i, v in enumerate(self.v)}}
