"""Dense float64 tensors with taped reverse-mode differentiation.

A ``Tape`` owns every tensor created on it, in creation order. Creation order
is a topological order of the computation graph, so ``Tape.backward`` is a
single reverse sweep that visits each node exactly once. Tensors are
immutable once created; running the same forward twice produces bitwise
identical values.

Only the primitives the rest of the package needs are provided. Shapes are
validated eagerly and errors name the offending operation and shapes.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tape",
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "set_debug_checks",
    "matmul",
    "conv2d",
    "upsample2d",
    "relu",
    "sigmoid",
    "softmax",
    "log",
    "exp",
    "concat",
    "broadcast_to",
    "logmeanexp",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an operation's contract."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or infinity is detected and checks are enabled."""


_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle per-operation NaN/inf detection on freshly created tensors.

    Off by default; the check costs one pass over every forward result.
    """
    global _debug_checks
    _debug_checks = bool(enabled)


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


class Tensor:
    """A node on a tape: float64 data plus the recipe to backpropagate."""

    __slots__ = ("data", "tape", "nid", "_parents", "_vjp")

    def __init__(self, data, tape: "Tape", parents=(), vjp=None):
        self.data = _as_array(data)
        self.tape = tape
        self._parents = tuple(parents)
        self._vjp = vjp
        self.nid = tape._register(self)

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def __repr__(self) -> str:
        return f"Tensor(nid={self.nid}, shape={self.data.shape})"

    # -- operator sugar ----------------------------------------------------
    def _wrap(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            if other.tape is not self.tape:
                raise ValueError("operands live on different tapes")
            return other
        return self.tape.constant(other)

    def __add__(self, other):
        return _binary("add", self, self._wrap(other), np.add,
                       lambda g, a, b: (g, g))

    __radd__ = __add__

    def __sub__(self, other):
        return _binary("sub", self, self._wrap(other), np.subtract,
                       lambda g, a, b: (g, -g))

    def __rsub__(self, other):
        return self._wrap(other).__sub__(self)

    def __mul__(self, other):
        return _binary("mul", self, self._wrap(other), np.multiply,
                       lambda g, a, b: (g * b.data, g * a.data))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary(
            "div", self, self._wrap(other), np.divide,
            lambda g, a, b: (g / b.data, -g * a.data / (b.data * b.data)))

    def __rtruediv__(self, other):
        return self._wrap(other).__truediv__(self)

    def __neg__(self):
        return _unary("neg", self, -self.data, lambda g, x: -g)

    def __matmul__(self, other):
        return matmul(self, self._wrap(other))

    def __abs__(self):
        return _unary("abs", self, np.abs(self.data),
                      lambda g, x: g * np.sign(x.data))

    def abs(self):
        return self.__abs__()

    def __getitem__(self, key):
        out = self.data[key]
        if not isinstance(out, np.ndarray):
            out = np.asarray(out)

        def vjp(g, x=self, key=key):
            full = np.zeros_like(x.data)
            full[key] = g
            return (full,)

        return _make("slice", self.tape, out.copy(), (self,), vjp)

    # -- reductions and shape ops -------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g, x=self, axis=axis, keepdims=keepdims):
            return (_spread(g, x.data.shape, axis, keepdims),)

        return _make("sum", self.tape, out, (self,), vjp)

    def mean(self, axis=None, keepdims: bool = False):
        out = self.data.mean(axis=axis, keepdims=keepdims)
        count = self.data.size if axis is None else _axis_count(self.data.shape, axis)

        def vjp(g, x=self, axis=axis, keepdims=keepdims, count=count):
            return (_spread(g, x.data.shape, axis, keepdims) / count,)

        return _make("mean", self.tape, out, (self,), vjp)

    def max(self, axis=None, keepdims: bool = False):
        out = self.data.max(axis=axis, keepdims=keepdims)

        def vjp(g, x=self, axis=axis, keepdims=keepdims):
            return (_max_vjp(np.asarray(g), x.data, axis, keepdims),)

        return _make("max", self.tape, out, (self,), vjp)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = self.data.reshape(shape)

        def vjp(g, x=self):
            return (np.asarray(g).reshape(x.data.shape),)

        return _make("reshape", self.tape, out, (self,), vjp)

    def transpose(self, axes=None):
        out = self.data.transpose(axes)
        inv = None if axes is None else np.argsort(axes)

        def vjp(g, inv=inv):
            return (np.asarray(g).transpose(inv),)

        return _make("transpose", self.tape, out, (self,), vjp)


class Tape:
    """Append-only record of tensors; owns backward traversal."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def _register(self, t: Tensor) -> int:
        self.nodes.append(t)
        return len(self.nodes) - 1

    def tensor(self, data) -> Tensor:
        """Create a differentiable leaf (a parameter or input)."""
        return Tensor(data, self)

    def constant(self, data) -> Tensor:
        """Create a leaf that participates in forward math only.

        Gradients still flow to it (it is a leaf like any other); callers
        simply never read them. Kept separate from ``tensor`` for intent.
        """
        return Tensor(data, self)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Reverse sweep from a scalar loss.

        Returns gradients for leaf tensors keyed by node id. Leaves the loss
        does not reach are simply absent; callers that need dense gradient
        maps fill zeros (see nets.Bound.grads_by_name).
        """
        if loss.tape is not self:
            raise ValueError("loss tensor belongs to a different tape")
        if loss.data.size != 1:
            raise ShapeError(
                f"backward: loss must be scalar, got shape {loss.data.shape}")
        grads: dict[int, np.ndarray] = {
            loss.nid: np.ones_like(loss.data)}
        for node in reversed(self.nodes[: loss.nid + 1]):
            g = grads.get(node.nid)
            if g is None or node._vjp is None:
                continue
            del grads[node.nid]
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None:
                    continue
                pg = np.asarray(pg, dtype=np.float64)
                if pg.shape != parent.data.shape:
                    raise ShapeError(
                        f"backward: gradient shape {pg.shape} does not match "
                        f"parent shape {parent.data.shape}")
                slot = grads.get(parent.nid)
                if slot is None:
                    grads[parent.nid] = pg.copy() if pg.base is not None else pg
                else:
                    slot += pg
        return grads


# -- construction helpers ----------------------------------------------------

def _make(op: str, tape: Tape, data, parents, vjp) -> Tensor:
    data = _as_array(data)
    if _debug_checks and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: non-finite values in forward result")
    return Tensor(data, tape, parents, vjp)


def _unary(op: str, x: Tensor, data, vjp_fn: Callable) -> Tensor:
    return _make(op, x.tape, data, (x,), lambda g: (vjp_fn(np.asarray(g), x),))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast up from."""
    g = np.asarray(g)
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(op: str, a: Tensor, b: Tensor, fwd, vjp_fn) -> Tensor:
    if a.tape is not b.tape:
        raise ValueError(f"{op}: operands live on different tapes")
    data = fwd(a.data, b.data)

    def vjp(g):
        ga, gb = vjp_fn(np.asarray(g), a, b)
        return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

    return _make(op, a.tape, data, (a, b), vjp)


def _axis_count(shape, axis) -> int:
    if isinstance(axis, int):
        axis = (axis,)
    n = 1
    for ax in axis:
        n *= shape[ax]
    return n


def _spread(g, shape, axis, keepdims) -> np.ndarray:
    """Broadcast a reduction gradient back over the reduced axes."""
    g = np.asarray(g)
    if axis is None:
        return np.broadcast_to(g, shape).copy() if g.ndim == 0 else np.full(shape, g)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).copy()


def _max_vjp(g, x, axis, keepdims) -> np.ndarray:
    """Route the gradient to the first maximal element along ``axis``."""
    if axis is None:
        out = np.zeros_like(x)
        out[np.unravel_index(np.argmax(x), x.shape)] = g
        return out
    idx = np.expand_dims(np.argmax(x, axis=axis), axis)
    full = np.zeros_like(x)
    gexp = g if keepdims else np.expand_dims(g, axis)
    np.put_along_axis(full, idx, gexp, axis)
    return full


# -- elementwise primitives ---------------------------------------------------

def relu(x: Tensor) -> Tensor:
    return _unary("relu", x, np.maximum(x.data, 0.0),
                  lambda g, t: g * (t.data > 0.0))


def sigmoid(x: Tensor) -> Tensor:
    # Numerically symmetric form; never exponentiates a large positive value.
    d = x.data
    out = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                   np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def vjp(g, out=out):
        return (np.asarray(g) * out * (1.0 - out),)

    return _make("sigmoid", x.tape, out, (x,), vjp)


def log(x: Tensor) -> Tensor:
    return _unary("log", x, np.log(x.data), lambda g, t: g / t.data)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make("exp", x.tape, out, (x,), lambda g: (np.asarray(g) * out,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g, out=out, axis=axis):
        g = np.asarray(g)
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - inner) * out,)

    return _make("softmax", x.tape, out, (x,), vjp)


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.tape is not b.tape:
        raise ValueError("matmul: operands live on different tapes")
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul: expects 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions differ, {a.data.shape} vs {b.data.shape}")
    out = a.data @ b.data

    def vjp(g):
        g = np.asarray(g)
        return (g @ b.data.T, a.data.T @ g)

    return _make("matmul", a.tape, out, (a, b), vjp)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over NHWC input with a (KH, KW, Cin, Cout) kernel.

    Symmetric zero padding, a single integer stride for both spatial axes.
    The inner contraction is a tensordot (BLAS); the sliding-window gather and
    the scatter in the backward pass are explicit.
    """
    if x.tape is not w.tape:
        raise ValueError("conv2d: operands live on different tapes")
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(
            f"conv2d: expects NHWC input and KHWC kernel, got {x.data.shape} "
            f"and {w.data.shape}")
    kh, kw, cin, cout = w.data.shape
    if x.data.shape[3] != cin:
        raise ShapeError(
            f"conv2d: input channels {x.data.shape[3]} do not match kernel "
            f"channels {cin}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    n, h, wdt, _ = x.data.shape
    hp, wp = h + 2 * padding, wdt + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    xp = x.data
    if padding:
        xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # win: (N, OH, OW, Cin, KH, KW); contract against (KH, KW, Cin, Cout)
    out = np.tensordot(win, w.data, axes=((3, 4, 5), (2, 0, 1)))
    oh, ow = out.shape[1], out.shape[2]

    def vjp(g, win=win):
        g = np.ascontiguousarray(g)
        gw = np.tensordot(win, g, axes=((0, 1, 2), (0, 1, 2)))
        gw = gw.transpose(1, 2, 0, 3)  # (Cin, KH, KW, Cout) -> (KH, KW, Cin, Cout)
        gx = np.zeros((n, hp, wp, cin))
        flat_w = w.data.reshape(kh, kw, cin, cout)
        for i in range(kh):
            for j in range(kw):
                gx[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += (
                    g @ flat_w[i, j].T)
        if padding:
            gx = gx[:, padding:hp - padding, padding:wp - padding, :]
        return (gx, gw)

    return _make("conv2d", x.tape, out, (x, w), vjp)


def upsample2d(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of NHWC by an integer factor."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample2d: expects NHWC, got {x.data.shape}")
    if factor < 1:
        raise ValueError("upsample2d: factor must be >= 1")
    out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)
    n, h, w, c = x.data.shape

    def vjp(g):
        g = np.asarray(g).reshape(n, h, factor, w, factor, c)
        return (g.sum(axis=(2, 4)),)

    return _make("upsample2d", x.tape, out, (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    tape = tensors[0].tape
    for t in tensors:
        if t.tape is not tape:
            raise ValueError("concat: operands live on different tapes")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p)
                     for p in np.split(np.asarray(g), splits, axis=axis))

    return _make("concat", tape, out, tuple(tensors), vjp)


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = np.broadcast_to(x.data, shape).copy()

    def vjp(g):
        return (_unbroadcast(np.asarray(g), x.data.shape),)

    return _make("broadcast_to", x.tape, out, (x,), vjp)


# -- composites ---------------------------------------------------------------

def logmeanexp(x: Tensor, axis=None) -> Tensor:
    """ln mean exp with the max subtracted as a constant before exponentiation.

    The shift is detached, which leaves the gradient of the exact expression
    intact (the shift cancels in the derivative) while keeping the forward
    pass overflow-safe.
    """
    shift_val = x.data.max(axis=axis, keepdims=True)
    shift = x.tape.constant(shift_val)
    lifted = log(exp(x - shift).mean(axis=axis, keepdims=True)) + shift
    if axis is None:
        return lifted.reshape(())
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    keep = [n for i, n in enumerate(lifted.data.shape)
            if i not in {a % x.data.ndim for a in axes}]
    return lifted.reshape(tuple(keep))
