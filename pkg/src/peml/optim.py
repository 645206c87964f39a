"""First-order optimizers over lists of leaf tensors."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class SGD:
    """Plain SGD: p <- p - lr * g."""

    def __init__(self):
        self.t = 0

    def step(self, params: list[Tensor], grads: list[np.ndarray], lrs) -> None:
        self.t += 1
        for p, g, lr in zip(params, grads, lrs):
            if lr:
                p.data = p.data - lr * g

    def remap(self, old: Tensor, new: Tensor, keep: np.ndarray) -> None:
        pass


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.state: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def step(self, params: list[Tensor], grads: list[np.ndarray], lrs) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, g, lr in zip(params, grads, lrs):
            m, v = self.state.get(id(p), (None, None))
            if m is None:
                m, v = np.zeros_like(p.data), np.zeros_like(p.data)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.state[id(p)] = (m, v)
            if lr:
                p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def remap(self, old: Tensor, new: Tensor, keep: np.ndarray) -> None:
        """Carry moments over to a pruned copy of ``old``."""
        st = self.state.pop(id(old), None)
        if st is not None:
            self.state[id(new)] = (st[0][keep], st[1][keep])


def make_optimizer(name: str):
    if name == "sgd":
        return SGD()
    if name == "adam":
        return Adam()
    raise ValueError(f"unknown optimizer {name!r}")
