"""Adam with bias correction, applied in place to a model's parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import Model


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(model: Model, gradients: dict[str, np.ndarray], state: AdamState | None = None,
              lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    params = model.parameters()
    return adam_update(params, gradients, state, lr, beta1, beta2, eps)


def adam_update(params: dict, gradients: dict[str, np.ndarray], state: AdamState | None = None,
                lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999,
                eps: float = 1e-8) -> AdamState:
    """Update ``params`` (name -> Tensor) in place; returns the new state."""
    state = state or AdamState()
    for name, g in gradients.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter "
                             f"{name} {params[name].data.shape}")
    t = state.t + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in gradients.items():
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        p = params[name]
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    state.t = t
    return state
