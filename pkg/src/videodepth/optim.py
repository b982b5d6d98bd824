"""AdamW with parameter groups and global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from src.videodepth.errors import ContractError
from src.videodepth.nn import Parameter


@dataclass
class ParamGroup:
    """Parameters sharing one learning rate.

    Attributes:
        name: Group label used in logs and checkpoints
        params: ``(dotted_name, parameter)`` pairs
        lr: Learning rate
        weight_decay: Decoupled weight decay coefficient
    """

    name: str
    params: list[tuple[str, Parameter]]
    lr: float
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"Learning rate of group {self.name!r} must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")


@dataclass
class AdamW:
    """Adam with decoupled weight decay.

    Frozen parameters (``requires_grad`` False) and parameters without a
    gradient are skipped, so their values and moments never change.
    """

    groups: list[ParamGroup]
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        seen: set[str] = set()
        for group in self.groups:
            for name, _ in group.params:
                if name in seen:
                    raise ContractError(f"Parameter {name!r} appears in more than one group")
                seen.add(name)

    def named_parameters(self):
        for group in self.groups:
            yield from group.params

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.grad = None

    def step(self):
        self.step_count += 1
        b1, b2 = self.betas
        bias1 = 1 - b1**self.step_count
        bias2 = 1 - b2**self.step_count
        for group in self.groups:
            for name, p in group.params:
                if not p.requires_grad or p.grad is None:
                    continue
                g = p.grad.astype(np.float64)
                m = self.m.get(name)
                v = self.v.get(name)
                if m is None or v is None:
                    m = np.zeros(p.shape)
                    v = np.zeros(p.shape)
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                self.m[name], self.v[name] = m, v
                update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
                data = p.data.astype(np.float64)
                data -= group.lr * (update + group.weight_decay * data)
                p.data = data.astype(p.dtype)

    def hyperparameters(self) -> dict:
        return {
            "betas": list(self.betas),
            "eps": self.eps,
            "step_count": self.step_count,
            "groups": [
                {
                    "name": g.name,
                    "lr": g.lr,
                    "weight_decay": g.weight_decay,
                    "params": [n for n, _ in g.params],
                }
                for g in self.groups
            ],
        }


def clip_grad_norm(params: list[Parameter], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns:
        The norm before clipping
    """
    grads = [p.grad for p in params if p.requires_grad and p.grad is not None]
    if not grads:
        return 0.0
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params:
            if p.requires_grad and p.grad is not None:
                p.grad = p.grad * factor
    return total
