from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ParamStore


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: ParamStore) -> "OptimizerState":
        return cls(
            {n: np.zeros_like(t.data) for n, t in params},
            {n: np.zeros_like(t.data) for n, t in params},
        )


def adamw_step(params: ParamStore, state: OptimizerState, lr: float, weight_decay: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               grads: dict[str, np.ndarray] | None = None) -> OptimizerState:
    """One AdamW update with decoupled weight decay, applied in place.

    Gradients are read from ``grads`` when given, otherwise from each
    parameter's ``.grad``.  Decay applies to every parameter, biases included.
    """
    missing = [n for n, t in params if (grads[n] if grads is not None and n in grads else t.grad) is None]
    if missing:
        raise ValueError(f"no gradient for parameter {missing[0]!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params:
        g = grads[name] if grads is not None and name in grads else p.grad
        g = g.astype(p.data.dtype, copy=False)
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps) - lr * weight_decay * p.data).astype(
            p.data.dtype
        )
    return state
