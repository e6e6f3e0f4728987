"""Sequential networks over ndgrad: specs, init, forward, dropout.

A network is a tuple of ``LayerSpec`` plus a name-keyed dict of float64
arrays. Forward passes run in one of three modes:

* ``train``: fixed dropout draws hard Bernoulli masks; concrete dropout
  draws the sigmoid-relaxed mask so its rate stays differentiable.
* ``eval``: deterministic, all dropout disabled.
* ``sample``: hard Bernoulli masks everywhere (concrete layers use their
  learned rate). This is the mode Monte Carlo inference replays.

Kept units are always rescaled by 1/(1-p) so eval needs no compensation.
Every dropout layer consumes exactly one uniform draw per unit per forward,
which makes runs replayable from the generator seed alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import ndgrad as nd
from .ndgrad import Tape, Tensor

__all__ = [
    "LayerSpec", "NetworkParams", "Bound",
    "linear", "conv", "relu", "sigmoid", "softmax", "dropout", "upsample",
    "reshape",
    "init_params", "bind", "forward", "forward_taps",
    "concrete_dropout_regulariser", "count_parameters",
]


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int = 0          # linear: output features
    filters: int = 0        # conv: output channels
    size: int = 0           # conv: square kernel extent
    stride: int = 1
    padding: int = 0
    factor: int = 2         # upsample: spatial factor
    p: float = 0.0          # dropout rate (initial rate when concrete)
    concrete: bool = False  # dropout: learn the rate via the relaxed mask
    axis: int = -1          # softmax axis
    shape: tuple = ()       # reshape: target per-sample shape


def linear(units: int) -> LayerSpec:
    return LayerSpec("linear", units=units)


def conv(filters: int, size: int, stride: int = 1, padding: int = 0) -> LayerSpec:
    return LayerSpec("conv", filters=filters, size=size, stride=stride,
                     padding=padding)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def sigmoid() -> LayerSpec:
    return LayerSpec("sigmoid")


def softmax(axis: int = -1) -> LayerSpec:
    return LayerSpec("softmax", axis=axis)


def dropout(p: float, concrete: bool = False) -> LayerSpec:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    return LayerSpec("dropout", p=p, concrete=concrete)


def upsample(factor: int = 2) -> LayerSpec:
    return LayerSpec("upsample", factor=factor)


def reshape(shape) -> LayerSpec:
    return LayerSpec("reshape", shape=tuple(shape))


@dataclass
class NetworkParams:
    specs: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.specs, self.input_shape,
                             {k: v.copy() for k, v in self.arrays.items()})


def _out_shape(spec: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    if spec.kind == "conv":
        if len(shape) != 3:
            raise nd.ShapeError(
                f"conv layer expects HWC input, got shape {shape}")
        h, w, _ = shape
        oh = (h + 2 * spec.padding - spec.size) // spec.stride + 1
        ow = (w + 2 * spec.padding - spec.size) // spec.stride + 1
        if oh < 1 or ow < 1:
            raise nd.ShapeError(
                f"conv layer output collapses: input {shape}, kernel "
                f"{spec.size}, stride {spec.stride}")
        return (oh, ow, spec.filters)
    if spec.kind == "linear":
        return (spec.units,)
    if spec.kind == "upsample":
        h, w, c = shape
        return (h * spec.factor, w * spec.factor, c)
    if spec.kind == "reshape":
        if int(np.prod(shape)) != int(np.prod(spec.shape)):
            raise nd.ShapeError(
                f"reshape layer: cannot view {shape} as {spec.shape}")
        return spec.shape
    return shape


def init_params(specs, input_shape, seed) -> NetworkParams:
    """He-normal weights N(0, 2/fan_in), zero biases, drawn layer by layer.

    Concrete dropout layers store their rate as an unconstrained logit so
    the optimizer can move it freely.
    """
    specs = tuple(specs)
    input_shape = tuple(input_shape)
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    shape = input_shape
    for i, spec in enumerate(specs):
        if spec.kind == "conv":
            fan_in = spec.size * spec.size * shape[-1]
            std = math.sqrt(2.0 / fan_in)
            arrays[f"layer{i}.w"] = rng.normal(
                0.0, std, size=(spec.size, spec.size, shape[-1], spec.filters))
            arrays[f"layer{i}.b"] = np.zeros(spec.filters)
        elif spec.kind == "linear":
            fan_in = int(np.prod(shape))
            std = math.sqrt(2.0 / fan_in)
            arrays[f"layer{i}.w"] = rng.normal(0.0, std, size=(fan_in, spec.units))
            arrays[f"layer{i}.b"] = np.zeros(spec.units)
        elif spec.kind == "dropout" and spec.concrete:
            p = min(max(spec.p, 1e-4), 1 - 1e-4)
            arrays[f"layer{i}.p_logit"] = np.array(math.log(p / (1 - p)))
        shape = _out_shape(spec, shape)
    return NetworkParams(specs, input_shape, arrays)


class Bound:
    """Parameters materialised as leaves on one tape, reusable across calls."""

    def __init__(self, params: NetworkParams, tape: Tape):
        self.params = params
        self.tape = tape
        self.leaves: dict[str, Tensor] = {
            name: tape.tensor(arr) for name, arr in params.arrays.items()}

    def grads_by_name(self, grad_map: dict[int, np.ndarray],
                      prefix: str = "") -> dict[str, np.ndarray]:
        """Name-keyed gradients; parameters the loss never reached get zeros."""
        out = {}
        for name, leaf in self.leaves.items():
            g = grad_map.get(leaf.nid)
            out[prefix + name] = np.zeros_like(leaf.data) if g is None else g
        return out


def bind(params: NetworkParams, tape: Tape) -> Bound:
    return Bound(params, tape)


def _logit(u: np.ndarray) -> np.ndarray:
    return np.log(u) - np.log1p(-u)


CONCRETE_TEMPERATURE = 0.1


def _apply_dropout(x: Tensor, spec: LayerSpec, leaf: Tensor | None,
                   mode: str, rng) -> Tensor:
    if mode == "eval":
        return x
    if rng is None:
        raise ValueError("dropout in train/sample mode requires an rng")
    tape = x.tape
    u = rng.uniform(1e-12, 1.0 - 1e-12, size=x.shape)
    if spec.concrete:
        assert leaf is not None
        p_now = 1.0 / (1.0 + math.exp(-float(leaf.data)))
        if mode == "sample":
            keep = tape.constant((u >= p_now).astype(np.float64))
            return x * keep * (1.0 / (1.0 - p_now))
        # Relaxed mask: drop probability stays differentiable in the logit.
        z = nd.sigmoid((leaf + tape.constant(_logit(u)))
                       * (1.0 / CONCRETE_TEMPERATURE))
        keep = 1.0 - z
        scale = 1.0 / (1.0 - nd.sigmoid(leaf))
        return x * keep * scale
    if spec.p == 0.0:
        return x
    keep = tape.constant((u >= spec.p).astype(np.float64))
    return x * keep * (1.0 / (1.0 - spec.p))


def forward_taps(net: NetworkParams | Bound, x, mode: str = "train",
                 rng=None, tape: Tape | None = None,
                 taps: tuple[int, ...] = ()) -> tuple[Tensor, dict[int, Tensor]]:
    """Run the network, also returning the outputs of the tapped layer indices.

    ``x`` may be an ndarray (batch-first) or a Tensor already on ``tape``.
    """
    if isinstance(net, Bound):
        bound = net
        tape = bound.tape
    else:
        if tape is None:
            tape = x.tape if isinstance(x, Tensor) else Tape()
        bound = Bound(net, tape)
    params = bound.params
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise ValueError("input tensor lives on a different tape")
        h = x
    else:
        h = tape.constant(np.asarray(x, dtype=np.float64))
    if h.data.shape[1:] != params.input_shape:
        raise nd.ShapeError(
            f"forward: input shape {h.data.shape[1:]} does not match network "
            f"input shape {params.input_shape}")
    if mode not in ("train", "eval", "sample"):
        raise ValueError(f"forward: unknown mode {mode!r}")
    tapped: dict[int, Tensor] = {}
    for i, spec in enumerate(params.specs):
        if spec.kind == "conv":
            h = nd.conv2d(h, bound.leaves[f"layer{i}.w"], stride=spec.stride,
                          padding=spec.padding) + bound.leaves[f"layer{i}.b"]
        elif spec.kind == "linear":
            if h.data.ndim > 2:
                h = h.reshape(h.data.shape[0], -1)
            h = nd.matmul(h, bound.leaves[f"layer{i}.w"]) + bound.leaves[f"layer{i}.b"]
        elif spec.kind == "relu":
            h = nd.relu(h)
        elif spec.kind == "sigmoid":
            h = nd.sigmoid(h)
        elif spec.kind == "softmax":
            h = nd.softmax(h, axis=spec.axis)
        elif spec.kind == "dropout":
            leaf = bound.leaves.get(f"layer{i}.p_logit")
            h = _apply_dropout(h, spec, leaf, mode, rng)
        elif spec.kind == "upsample":
            h = nd.upsample2d(h, spec.factor)
        elif spec.kind == "reshape":
            h = h.reshape((h.data.shape[0],) + spec.shape)
        else:
            raise ValueError(f"forward: unknown layer kind {spec.kind!r}")
        if i in taps:
            tapped[i] = h
    return h, tapped


def forward(net: NetworkParams | Bound, x, mode: str = "train", rng=None,
            tape: Tape | None = None) -> Tensor:
    out, _ = forward_taps(net, x, mode=mode, rng=rng, tape=tape)
    return out


def _fan_in(spec: LayerSpec, w_shape: tuple[int, ...]) -> int:
    if spec.kind == "conv":
        return w_shape[0] * w_shape[1] * w_shape[2]
    return w_shape[0]


def concrete_dropout_regulariser(bound: Bound, weight_reg: float,
                                 dropout_reg: float) -> Tensor:
    """Penalty tying each weight matrix to the dropout rate feeding it.

    Per weight layer l with preceding dropout rate p:
        weight_reg * (1 - p) * ||M_l||^2
      + dropout_reg * K_l * (p ln p + (1-p) ln(1-p) + ln 2)
    where K_l is the layer fan-in. Weight layers with no preceding dropout
    contribute only the weight term. The entropy term vanishes at p = 1/2
    and is differentiable through concrete rates.
    """
    tape = bound.tape
    total = tape.constant(0.0)
    pending: LayerSpec | None = None
    pending_leaf: Tensor | None = None
    for i, spec in enumerate(bound.params.specs):
        if spec.kind == "dropout":
            pending = spec
            pending_leaf = bound.leaves.get(f"layer{i}.p_logit")
            continue
        if spec.kind not in ("linear", "conv"):
            continue
        w = bound.leaves[f"layer{i}.w"]
        sq = (w * w).sum()
        k = _fan_in(spec, w.data.shape)
        if pending is None:
            total = total + weight_reg * sq
        elif pending.concrete:
            p = nd.sigmoid(pending_leaf)
            ent = p * nd.log(p) + (1.0 - p) * nd.log(1.0 - p) + math.log(2.0)
            total = total + weight_reg * (1.0 - p) * sq + dropout_reg * k * ent
        else:
            p = pending.p
            ent = (p * math.log(p) if p > 0 else 0.0) + \
                  ((1 - p) * math.log(1 - p) if p < 1 else 0.0) + math.log(2.0)
            total = total + weight_reg * (1.0 - p) * sq + dropout_reg * k * ent
        pending = None
        pending_leaf = None
    return total


def count_parameters(params: NetworkParams) -> int:
    return sum(a.size for a in params.arrays.values())
