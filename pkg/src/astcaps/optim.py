"""Bias-corrected Adam over named parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    """Adam optimizer updating ``Tensor.data`` in place.

    Moments are keyed by parameter name and created as zeros on construction,
    so their shapes always mirror the parameters.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.state = OptimizerState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, p in params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def step(self, grads: dict[str, np.ndarray]):
        adam_step(self.state, self.params, grads)


def adam_step(state: OptimizerState, params: dict[str, Tensor], grads: dict[str, np.ndarray]):
    missing = [name for name in params if name not in grads]
    if missing:
        raise KeyError(f"adam_step: no gradient for {', '.join(missing)}")
    state.step += 1
    if not any(np.any(grads[name]) for name in params):
        # all-zero gradient: leave moments and parameters untouched
        return
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
