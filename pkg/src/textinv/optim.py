"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import ShapeError, Tensor


def effective_lr(base_lr: float, devices: int = 2, batch_size: int = 4) -> float:
    """LDM-style learning-rate scaling by device count and per-device batch."""
    return base_lr * devices * batch_size


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **hyper) -> "AdamState":
        st = cls(**hyper)
        st.first_moment = [np.zeros_like(_arr(p)) for p in params]
        st.second_moment = [np.zeros_like(_arr(p)) for p in params]
        return st


def _arr(p):
    return p.data if isinstance(p, Tensor) else np.asarray(p)


def adam_update(params, grads, state: AdamState):
    """One Adam step on raw arrays. Returns the new parameter arrays; ``state`` is advanced in place."""
    if not (len(params) == len(grads) == len(state.first_moment) == len(state.second_moment)):
        raise ShapeError("adam_update: params, grads and moments differ in length")
    state.step_count += 1
    t = state.step_count
    dtype = np.asarray(params[0]).dtype if params else np.float32
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    lr = np.asarray(state.lr, dtype=dtype)
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        p = np.asarray(p)
        g = np.asarray(g, dtype=p.dtype)
        if p.shape != g.shape or p.shape != state.first_moment[i].shape:
            raise ShapeError(f"adam_update: shape mismatch at param {i}: {p.shape} vs grad {g.shape}")
        m = state.first_moment[i] = b1 * state.first_moment[i] + (1 - b1) * g
        v = state.second_moment[i] = b2 * state.second_moment[i] + (1 - b2) * g * g
        m_hat = m / np.asarray(bc1, dtype=p.dtype)
        v_hat = v / np.asarray(bc2, dtype=p.dtype)
        out.append((p - lr * m_hat / (np.sqrt(v_hat) + np.asarray(state.eps, dtype=p.dtype))).astype(p.dtype))
    return out


class Adam:
    """Stateful wrapper updating :class:`Tensor` parameters from their ``.grad``."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState.for_params(self.params, lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new = adam_update([p.data for p in self.params], grads, self.state)
        for p, arr in zip(self.params, new):
            p.data = arr

    def state_arrays(self) -> dict:
        st = {"step_count": np.asarray(self.state.step_count)}
        for i, (m, v) in enumerate(zip(self.state.first_moment, self.state.second_moment)):
            st[f"m.{i}"] = m
            st[f"v.{i}"] = v
        return st

    def load_state_arrays(self, st: dict) -> None:
        self.state.step_count = int(st["step_count"])
        n = len(self.params)
        self.state.first_moment = [np.array(st[f"m.{i}"]) for i in range(n)]
        self.state.second_moment = [np.array(st[f"v.{i}"]) for i in range(n)]
