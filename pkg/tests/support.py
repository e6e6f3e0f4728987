"""Shared test machinery: toy discriminators and small trained stacks.

Importable helper module (not collected by pytest).
"""

import numpy as np

from polypkit import fsad, nets
from polypkit import ndgrad as nd
from polypkit.ndgrad import Tape


def draw_gaussian_pairs(rng, n, rho):
    """Samples of a standard bivariate Gaussian with correlation rho.

    True mutual information is -0.5 * ln(1 - rho^2) nats.
    """
    x = rng.standard_normal(n)
    y = rho * x + np.sqrt(1.0 - rho ** 2) * rng.standard_normal(n)
    return x, y


def train_dv_estimator(rho, *, steps=400, batch=256, lr=1e-3, seed=0):
    """Train a small discriminator to tighten the DV bound on Gaussian pairs.

    Returns the bound evaluated on a large fresh sample (held out from
    training, so the estimate is not optimistically biased by overfitting).
    """
    specs = (nets.linear(64), nets.relu(), nets.linear(64), nets.relu(),
             nets.linear(1))
    params = nets.init_params(specs, (2,), seed=seed)
    opt = nd.adam(lr)
    rng = np.random.default_rng(seed)

    def scores(tape, bound, x, y_joint, y_marg):
        joint = nets.forward(bound, np.stack([x, y_joint], axis=1),
                             mode="eval")
        marg = nets.forward(bound, np.stack([x, y_marg], axis=1),
                            mode="eval")
        return joint.reshape(len(x)), marg.reshape(len(x))

    for _ in range(steps):
        x, y = draw_gaussian_pairs(rng, batch, rho)
        y_marg = y[rng.permutation(batch)]
        tape = Tape()
        bound = nets.bind(params, tape)
        j, m = scores(tape, bound, x, y, y_marg)
        loss = fsad.dv_mi_lower_bound(j, m) * (-1.0)
        grads = tape.backward(loss)
        nd.optimizer_step(opt, params.arrays, bound.grads_by_name(grads))

    x, y = draw_gaussian_pairs(rng, 8192, rho)
    y_marg = y[rng.permutation(8192)]
    tape = Tape()
    j, m = scores(tape, nets.bind(params, tape), x, y, y_marg)
    return fsad.dv_mi_lower_bound(j.data, m.data)
