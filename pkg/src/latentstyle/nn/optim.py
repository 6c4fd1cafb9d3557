from __future__ import annotations

import math
from typing import Dict, Iterable, Union

import numpy as np

from .layers import Module, Param


class Adam:
    """Adam with bias correction. Gradients are zeroed after every step."""

    def __init__(self, params: Union[Module, Dict[str, Param], Iterable[Param]], lr: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        if isinstance(params, Module):
            params = params.params()
        if isinstance(params, dict):
            params = params.values()
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps

    def step(self) -> None:
        for p in self.params:
            p.step += 1
            p.m *= self.beta1
            p.m += (1.0 - self.beta1) * p.grad
            p.v *= self.beta2
            p.v += (1.0 - self.beta2) * p.grad * p.grad
            mhat = p.m / (1.0 - self.beta1**p.step)
            vhat = p.v / (1.0 - self.beta2**p.step)
            p.value -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
            p.grad[...] = 0.0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad[...] = 0.0


def adam_step(params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    Adam(params, lr, (beta1, beta2), eps).step()


def step_decay(base_lr: float, epoch: int, gamma: float) -> float:
    return base_lr * gamma**epoch


def cosine_decay(base_lr: float, epoch: int, epochs: int, min_lr: float = 0.0) -> float:
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * epoch / max(epochs, 1)))
