"""Central-difference gradient verification for taped losses."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor

__all__ = ["finite_difference", "max_relative_error", "check_gradients"]

LossBuilder = Callable[[Tape, Sequence[Tensor]], Tensor]


def _eval_loss(build: LossBuilder, arrays: Sequence[np.ndarray]) -> float:
    tape = Tape()
    leaves = [tape.tensor(a) for a in arrays]
    loss = build(tape, leaves)
    return float(loss.data)


def finite_difference(build: LossBuilder, arrays: Sequence[np.ndarray],
                      h: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of a scalar loss wrt every input array."""
    grads = []
    for i, base in enumerate(arrays):
        g = np.zeros_like(base, dtype=np.float64)
        flat = g.reshape(-1)
        for j in range(base.size):
            bumped = [a.copy() for a in arrays]
            bumped[i].reshape(-1)[j] += h
            up = _eval_loss(build, bumped)
            bumped[i].reshape(-1)[j] -= 2.0 * h
            down = _eval_loss(build, bumped)
            flat[j] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom))


def check_gradients(build: LossBuilder, arrays: Sequence[np.ndarray],
                    h: float = 1e-5, rel_tol: float = 1e-5) -> float:
    """Compare taped gradients against central differences.

    Returns the worst relative error over every element of every input;
    raises AssertionError above ``rel_tol`` naming the offending input.
    """
    tape = Tape()
    leaves = [tape.tensor(a) for a in arrays]
    loss = build(tape, leaves)
    grad_map = tape.backward(loss)
    numeric = finite_difference(build, arrays, h=h)
    worst = 0.0
    for i, leaf in enumerate(leaves):
        analytic = grad_map.get(leaf.nid)
        if analytic is None:
            analytic = np.zeros_like(leaf.data)
        err = max_relative_error(analytic, numeric[i])
        if err > rel_tol:
            raise AssertionError(
                f"gradient mismatch on input {i}: rel err {err:.3e} > {rel_tol:.0e}")
        worst = max(worst, err)
    return worst
