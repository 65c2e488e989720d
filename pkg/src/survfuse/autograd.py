"""Reverse-mode differentiation over float64 numpy arrays.

Operations performed inside an active :class:`Tape` are recorded in order;
:func:`backward` walks that record once, in reverse, accumulating adjoints.
Operations run outside a tape are plain numpy evaluation (used for inference
and for finite-difference probes).

Batched inputs are supported throughout: ``matmul`` broadcasts leading axes
like ``numpy.matmul`` and elementwise ops broadcast like numpy, with gradients
summed back onto the original shapes.
"""

from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "survfuse_active_tape", default=None
)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class Tensor:
    """An n-d float64 array that may participate in a recorded graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tracked")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        # set when the tensor is the output of a recorded op
        self._tracked = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(eq=False)
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass(eq=False)
class Tape:
    """Ordered record of operations performed while the tape is active."""

    nodes: list[_Node] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        if self._token is not None:
            raise RuntimeError("tape is already active")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    @property
    def parameters(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and id(t) not in seen:
                    seen[id(t)] = t
        return list(seen.values())


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(out_data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t._tracked for t in inputs):
        out._tracked = True
        tape.nodes.append(_Node(out, inputs, vjp))
    return out


def backward(tape: Tape, loss: Tensor, watch: Sequence[Tensor] = ()) -> dict[int, np.ndarray]:
    """Propagate d(loss) back through ``tape``.

    Gradients land in ``.grad`` of every ``requires_grad`` tensor reached and
    are also returned keyed by ``id(tensor)``.  Intermediate tensors listed in
    ``watch`` have their gradients returned too (zeros if unreached).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not any(node.out is loss for node in tape.nodes):
        raise ValueError("loss was not produced on this tape")
    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    watched = {id(t): t for t in watch}
    seen: dict[int, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = adj.pop(id(node.out), None)
        if g is None:
            continue
        if id(node.out) in watched:
            seen[id(node.out)] = g
        grads = node.vjp(g)
        for t, gi in zip(node.inputs, grads):
            if gi is None or not t._tracked:
                continue
            key = id(t)
            if key in adj:
                adj[key] = adj[key] + gi
            else:
                adj[key] = gi
            if t.requires_grad:
                leaves[key] = t
    out = {}
    for key, t in leaves.items():
        g = adj.get(key)
        if g is None:
            continue
        t.grad = g if t.grad is None else t.grad + g
        out[key] = g
    for key, t in watched.items():
        if key not in out:
            out[key] = seen.get(key, adj.get(key, np.zeros_like(t.data)))
    return out


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """Exact (erf) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return _record(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product, with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record(ad @ bd, (a, b), vjp)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    a = as_tensor(a)
    if axes is None:
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    src = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _record(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def _broadcast_except(ts: tuple[Tensor, ...], axis: int) -> tuple[Tensor, ...]:
    """Broadcast operands against each other on every axis but ``axis``."""
    ndim = max(t.ndim for t in ts)
    shapes = []
    for t in ts:
        s = (1,) * (ndim - t.ndim) + t.shape
        shapes.append(s)
    ax = axis % ndim
    target = np.broadcast_shapes(*[s[:ax] + (1,) + s[ax + 1 :] for s in shapes])
    out = []
    for t, s in zip(ts, shapes):
        out.append(broadcast_to(t, target[:ax] + (s[ax],) + target[ax + 1 :]))
    return tuple(out)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = _broadcast_except(tuple(as_tensor(t) for t in tensors), axis)
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _record(
        np.concatenate([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    src = a.shape
    return _record(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, src),))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    target = np.broadcast_shapes(*[t.shape for t in ts])
    ts = tuple(broadcast_to(t, target) for t in ts)
    n = len(ts)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _record(np.stack([t.data for t in ts], axis=axis), ts, vjp)


def take(a, index) -> Tensor:
    """Basic or integer-array indexing, ``a[index]``."""
    a = as_tensor(a)
    src = a.shape

    def vjp(g):
        out = np.zeros(src)
        np.add.at(out, index, g)
        return (out,)

    return _record(a.data[index], (a,), vjp)


def segment_mean(a, starts: np.ndarray, counts: np.ndarray) -> Tensor:
    """Mean over contiguous segments of axis -2 (rows ``starts[i]:starts[i]+counts[i]``).

    Sums run left to right within each segment, so the result only depends on
    the row order the caller chose.
    """
    a = as_tensor(a)
    starts = np.asarray(starts, dtype=np.intp)
    counts = np.asarray(counts, dtype=np.intp)
    if np.any(counts < 1):
        raise ValueError("segment_mean: every segment needs at least one row")
    out = np.add.reduceat(a.data, starts, axis=-2) / counts[:, None]
    rows = np.concatenate([np.arange(s, s + c) for s, c in zip(starts, counts)])
    seg_of_row = np.repeat(np.arange(len(starts)), counts)
    src = a.shape

    def vjp(g):
        full = np.zeros(src)
        full[..., rows, :] = (g / counts[:, None])[..., seg_of_row, :]
        return (full,)

    return _record(out, (a,), vjp)


# ---------------------------------------------------------------- fused ops


def softmax(a, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), vjp)


def softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise ValueError("softmax_rows: input contains non-finite values")
    return softmax(x, axis=-1)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    gamma = _align_probe(gamma, 1, x.ndim)
    beta = _align_probe(beta, 1, x.ndim)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    n = xd.shape[-1]

    def vjp(g):
        gg = _unbroadcast(g * xhat, gd.shape)
        gb = _unbroadcast(g, beta.shape)
        gx_hat = g * gd
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / n
        )
        return gx, gg, gb

    return _record(xhat * gd + beta.data, (x, gamma, beta), vjp)


def _align_probe(p: Tensor, base_ndim: int, x_ndim: int) -> Tensor:
    """Insert singleton axes after a parameter's leading probe axis.

    A parameter with one more axis than its natural rank carries a probe axis
    (one perturbed copy per finite-difference probe); activations then carry
    the same leading axis, and the singletons line it up with it.
    """
    extra = p.ndim - base_ndim
    if extra <= 0:
        return p
    pad = x_ndim - 1 - base_ndim
    if pad <= 0:
        return p
    return reshape(p, p.shape[:extra] + (1,) * pad + p.shape[extra:])


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (fan_in, fan_out)."""
    x = as_tensor(x)
    if x.ndim == 1:
        y = linear(reshape(x, (1, x.shape[0])), weight, bias)
        return reshape(y, y.shape[:-2] + y.shape[-1:])
    weight = _align_probe(as_tensor(weight), 2, x.ndim)
    y = matmul(x, weight)
    if bias is None:
        return y
    return add(y, _align_probe(as_tensor(bias), 1, x.ndim))


# ---------------------------------------------------------------- oracle + optimizer


def fd_gradient(
    f: Callable[[], float], params: Sequence[Tensor], step: float = 1e-4
) -> list[np.ndarray]:
    """Central differences ``(f(p+h) - f(p-h)) / 2h``, one coordinate at a time.

    ``f`` is called with no arguments and must read the current parameter
    values; each coordinate is restored exactly after probing.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    out = []
    for p in params:
        flat = p.data.reshape(-1)
        g = np.empty(flat.shape)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f())
            flat[i] = orig - step
            fm = float(f())
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * step)
        out.append(g.reshape(p.shape))
    return out


def fd_scalar(f: Callable[[float], float], x: float, step: float = 1e-4) -> float:
    return (f(x + step) - f(x - step)) / (2.0 * step)


@dataclass
class AdamState:
    lr: float = 1e-4
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decoupled: bool = False
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Sequence[np.ndarray]):
    """One Adam update, in place on ``params``.

    With ``decoupled=False`` weight decay is L2 folded into the gradient;
    otherwise it shrinks the parameter directly (AdamW).
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state was built for a different parameter list")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
        if state.weight_decay and not state.decoupled:
            g = g + state.weight_decay * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay and state.decoupled:
            p.data -= state.lr * state.weight_decay * p.data
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params
