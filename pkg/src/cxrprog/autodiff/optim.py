"""SGD with momentum, Adam, and the cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError


@dataclass
class OptimizerState:
    kind: str
    lr: float
    weight_decay: float = 0.0
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    buffers: dict[str, list[np.ndarray]] = field(default_factory=dict)


class Optimizer:
    def __init__(self, params, state: OptimizerState):
        self.params = list(params)
        self.state = state

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = float(value)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def _grads(self):
        grads = []
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ContractError(f"parameter {i} (shape {p.shape}) has no gradient")
            grads.append(p.grad)
        return grads

    def step(self) -> None:
        raise NotImplementedError

    def named_buffers(self, prefix: str):
        for key, bufs in self.state.buffers.items():
            for i, b in enumerate(bufs):
                yield f"{prefix}.{key}.{i}", b


class SGD(Optimizer):
    """``v <- mu*v + g + wd*p``; ``p <- p - lr*v``."""

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        params = list(params)
        state = OptimizerState("sgd_momentum", lr=lr, momentum=momentum, weight_decay=weight_decay)
        state.buffers["velocity"] = [np.zeros_like(p.data) for p in params]
        super().__init__(params, state)

    def step(self) -> None:
        grads = self._grads()
        st = self.state
        for p, g, v in zip(self.params, grads, st.buffers["velocity"]):
            v *= st.momentum
            v += g
            if st.weight_decay:
                v += st.weight_decay * p.data
            p.data -= st.lr * v
        st.step += 1


class Adam(Optimizer):
    """Adam with bias correction; weight decay is added to the gradient."""

    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        params = list(params)
        state = OptimizerState("adam", lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)
        state.buffers["m"] = [np.zeros_like(p.data) for p in params]
        state.buffers["v"] = [np.zeros_like(p.data) for p in params]
        super().__init__(params, state)

    def step(self) -> None:
        grads = self._grads()
        st = self.state
        st.step += 1
        b1, b2 = st.betas
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        for p, g, m, v in zip(self.params, grads, st.buffers["m"], st.buffers["v"]):
            if st.weight_decay:
                g = g + st.weight_decay * p.data
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)).astype(p.data.dtype)


def make_optimizer(kind: str, params, lr: float, weight_decay: float = 0.0) -> Optimizer:
    if kind == "adam":
        return Adam(params, lr, weight_decay=weight_decay)
    if kind in ("sgd", "sgd_momentum"):
        return SGD(params, lr, momentum=0.9, weight_decay=weight_decay)
    raise ContractError(f"unknown optimizer {kind!r}")


def optimizer_step(optimizer: Optimizer) -> None:
    optimizer.step()


def cosine_annealing_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    if total_steps <= 0:
        raise ContractError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))
