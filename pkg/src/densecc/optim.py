"""AdamW with decoupled weight decay and a warmup-then-linear-decay schedule.

Two learning-rate groups are supported so the token encoder can run at a
different rate than the rest of the network.
"""

from __future__ import annotations

import numpy as np

from densecc.autodiff import Tensor


def schedule_factor(step: int, total_steps: int, warmup_frac: float = 0.06) -> float:
    """Piecewise-linear multiplier: 0 -> 1 over the warmup window, then 1 -> 0.

    `step` counts completed updates; the factor hits exactly 1.0 at
    warmup_frac * total_steps and clamps at 0 beyond total_steps.
    """
    if total_steps <= 0 or step <= 0:
        return 0.0
    warmup = warmup_frac * total_steps
    if step <= warmup:
        return step / warmup
    if step >= total_steps:
        return 0.0
    return (total_steps - step) / (total_steps - warmup)


class AdamW:
    """Per-parameter moment tracking over named groups of tensors.

    groups: list of (params, base_lr) where params is a dict name -> Tensor.
    """

    def __init__(
        self,
        groups: list[tuple[dict[str, Tensor], float]],
        total_steps: int,
        warmup_frac: float = 0.06,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.groups = [(dict(params), float(lr)) for params, lr in groups]
        self.total_steps = int(total_steps)
        self.warmup_frac = float(warmup_frac)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}
        for params, _ in self.groups:
            for t in params.values():
                self._m[id(t)] = np.zeros_like(t.data)
                self._v[id(t)] = np.zeros_like(t.data)

    def zero_grad(self) -> None:
        for params, _ in self.groups:
            for t in params.values():
                t.grad = None

    def current_factor(self) -> float:
        return schedule_factor(self.step_count, self.total_steps, self.warmup_frac)

    def step(self) -> float:
        """Apply one update from accumulated grads; returns the effective schedule factor."""
        self.step_count += 1
        factor = self.current_factor()
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for params, base_lr in self.groups:
            lr = base_lr * factor
            for tensor in params.values():
                g = tensor.grad
                if g is None:
                    g = np.zeros_like(tensor.data)
                m = self._m[id(tensor)]
                v = self._v[id(tensor)]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * (g * g)
                update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
                if self.weight_decay:
                    update = update + self.weight_decay * tensor.data
                tensor.data = tensor.data - lr * update
        return factor
