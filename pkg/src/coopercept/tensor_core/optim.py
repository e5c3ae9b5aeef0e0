"""Adam with the step-decay learning-rate schedule used for training."""
from __future__ import annotations

import numpy as np

from .nn import Parameter


def step_decay_lr(base_lr: float, epoch: int, step_size: int = 20, gamma: float = 0.1) -> float:
    """Learning rate after multiplying by ``gamma`` every ``step_size`` epochs."""
    return base_lr * gamma ** (epoch // step_size)


class Adam:
    def __init__(self, params: list[Parameter], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                # parameters outside the current graph still decay their moments
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype)

    def state_dict(self, names: list[str]) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array([self.t], dtype=np.float32)}
        for name, m, v in zip(names, self.m, self.v):
            out[f"adam.m.{name}"] = m
            out[f"adam.v.{name}"] = v
        return out
