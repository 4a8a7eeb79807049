"""Adam with bias correction, applied in place to named parameters."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numba
import numpy as np

from .errors import DimensionError, InconsistentStateError
from .tensor import Tensor


# IEEE division and NaN semantics are kept so non-finite updates surface downstream.
@numba.njit(cache=True, error_model="numpy", fastmath={"nsz", "arcp", "contract", "afn", "reassoc"})
def _adam_kernel(p, g, m, v, lr, b1, b2, corr1, corr2, eps):  # pragma: no cover - compiled
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / corr1) / (np.sqrt(vi / corr2) + eps)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState, grads: Mapping[str, np.ndarray] | None = None) -> None:
    """One Adam update. Gradients default to each parameter's ``.grad``."""
    resolved: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            raise InconsistentStateError(f"no gradient for parameter {name!r}")
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        resolved[name] = g

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for name, p in params.items():
        g = resolved[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        _adam_kernel(
            p.data.reshape(-1), np.ascontiguousarray(g).reshape(-1), m.reshape(-1), state.v[name].reshape(-1),
            state.lr, b1, b2, corr1, corr2, state.eps,
        )


class Adam:
    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
        self.params = dict(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, self.state)
