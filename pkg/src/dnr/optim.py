"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from dnr.errors import ContractViolation, NumericFault
from dnr.tensor import Tensor


@dataclass
class AdamW:
    """Decoupled-weight-decay Adam over a fixed list of parameters.

    Only the tensors handed to the constructor get moment buffers; anything
    frozen should simply be left out.
    """

    params: list[Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.params = list(self.params)
        if self.lr <= 0:
            raise ContractViolation("lr must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ContractViolation("betas must lie in (0, 1)")
        if self.weight_decay < 0:
            raise ContractViolation("weight_decay must be non-negative")
        for p in self.params:
            self.m[id(p)] = np.zeros_like(p.data)
            self.v[id(p)] = np.zeros_like(p.data)

    @property
    def state_names(self) -> list[str]:
        return [p.name for p in self.params]

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p in self.params:
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ContractViolation(f"gradient shape {g.shape} != parameter shape {p.shape} for {p.name}")
            if not np.all(np.isfinite(g)):
                raise NumericFault(f"non-finite gradient for parameter {p.name}")
            m = self.m[id(p)]
            v = self.v[id(p)]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adamw_step(state: AdamW, grads: dict[Tensor, np.ndarray]) -> AdamW:
    state.step(grads)
    return state
