"""Plain SGD and Adam over name-keyed parameter dicts.

Parameters are bare float64 numpy arrays, updated in place. The optimizer
state carries everything needed to resume a run mid-stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import NonFiniteError

__all__ = ["OptimizerState", "sgd", "adam", "optimizer_step"]


@dataclass
class OptimizerState:
    kind: str                 # "sgd" or "adam"
    lr: float
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def sgd(lr: float) -> OptimizerState:
    return OptimizerState(kind="sgd", lr=lr)


def adam(lr: float, beta1: float = 0.9, beta2: float = 0.999,
         eps: float = 1e-8) -> OptimizerState:
    return OptimizerState(kind="adam", lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def optimizer_step(state: OptimizerState,
                   params: dict[str, np.ndarray],
                   grads: Mapping[str, np.ndarray]) -> None:
    """Apply one update in place. Missing gradients are treated as zero.

    Raises NonFiniteError naming the parameter if its gradient contains NaN
    or inf; the parameters are left untouched in that case.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"optimizer_step: gradient for unknown parameter {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(
                f"optimizer_step: non-finite gradient for parameter {name!r}")
    state.step += 1
    if state.kind == "sgd":
        for name, p in params.items():
            g = grads.get(name)
            if g is not None:
                p -= state.lr * g
        return
    if state.kind != "adam":
        raise ValueError(f"optimizer_step: unknown optimizer kind {state.kind!r}")
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / (1.0 - b1 ** t)
        vhat = v / (1.0 - b2 ** t)
        p -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
