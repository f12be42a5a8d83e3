"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active (``with Tape() as tape:``)
and touching at least one tensor with ``requires_grad`` are appended to that
tape.  Outside a tape nothing is recorded, which is how inference runs.

Only the operations the sequence model needs are provided.  Elementwise
binary ops follow numpy broadcasting; their gradients are summed back to the
operand shapes.
"""

from __future__ import annotations

import contextvars
import os
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError

_ACTIVE_TAPE: contextvars.ContextVar = contextvars.ContextVar("affectformer_tape", default=None)

# Finite-output assertion after every op.  Off by default: it costs a full
# pass over each result.
DEBUG_NUMERICS = os.environ.get("AFFECT_DEBUG_NUMERICS", "") not in ("", "0")

LAYER_NORM_EPS = 1e-5


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_tape", "_generation", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = None
        self._tape = None
        self._generation = -1
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad=False, name=None) -> Tensor:
    """Copy ``data`` into a new leaf tensor."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output, inputs, backward_fn):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable operations.

    Node ids are positions in execution order, so walking them in reverse is
    a valid topological order for the backward pass.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._generation = 0
        self._tokens = []

    def __enter__(self):
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._tokens.pop())
        return False

    def __len__(self):
        return len(self._nodes)

    def owns(self, t: Tensor) -> bool:
        return t._tape is self and t._generation == self._generation and t.node_id is not None

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> int:
        for inp in inputs:
            if inp.node_id is not None and not self.owns(inp):
                raise ContractError(
                    "input tensor belongs to another tape or to a cleared tape; "
                    "its node id is no longer valid"
                )
        out.node_id = len(self._nodes)
        out._tape = self
        out._generation = self._generation
        self._nodes.append(_Node(out, tuple(inputs), backward_fn))
        return out.node_id

    def clear(self):
        self._nodes = []
        self._generation += 1

    def backward(self, loss: Tensor):
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.owns(loss):
            raise ContractError("loss is not on the current tape")
        pending = {loss.node_id: np.ones_like(loss.data)}
        for nid in range(loss.node_id, -1, -1):
            g = pending.pop(nid, None)
            if g is None:
                continue
            node = self._nodes[nid]
            node.output.grad = g
            grads = node.backward_fn(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.node_id is not None:
                    prev = pending.get(inp.node_id)
                    pending[inp.node_id] = gi if prev is None else prev + gi
                else:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def backward(loss: Tensor):
    """Populate ``.grad`` of every tensor reachable from scalar ``loss``.

    Leaf gradients accumulate across calls; reset them with ``zero_grad``.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ContractError("loss is not on any tape")
    loss._tape.backward(loss)


def _result(data, inputs, backward_fn) -> Tensor:
    out = Tensor(data)
    if DEBUG_NUMERICS and not np.all(np.isfinite(out.data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise FloatingPointError("non-finite value produced from finite inputs")
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(a: Tensor, b: Tensor, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must agree exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _result(
        ad @ bd,
        (a, b),
        lambda g: (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g),
    )


def transpose(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise DimensionError(f"transpose needs at least 2 axes, got shape {x.shape}")
    return _result(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def concat_lastdim(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat_lastdim needs at least one tensor")
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise DimensionError(
                f"concat_lastdim: leading shapes differ: {[t.shape for t in tensors]}"
            )
    splits = np.cumsum([t.shape[-1] for t in tensors])[:-1]
    return _result(
        np.concatenate([t.data for t in tensors], axis=-1),
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=-1)),
    )


def slice_time(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` along the first (time) axis."""
    n = x.shape[0]
    if not 0 <= start < stop <= n:
        raise DimensionError(f"slice_time: range [{start}, {stop}) outside extent {n}")
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _result(x.data[start:stop], (x,), bw)


def index_rows(x: Tensor, idx) -> Tensor:
    """Gather rows of ``x`` (first axis) at integer positions ``idx``."""
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= x.shape[0])):
        raise DimensionError(f"index_rows: bad indices for extent {x.shape[0]}")
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _result(x.data[idx], (x,), bw)


def split_heads(x: Tensor, num_heads: int) -> Tensor:
    """[T x d_m] -> [H x T x d_m/H]."""
    if x.ndim != 2:
        raise DimensionError(f"split_heads expects a T x d matrix, got shape {x.shape}")
    t, d = x.shape
    if num_heads < 1 or d % num_heads:
        raise ConfigError(f"model dim {d} is not divisible by {num_heads} heads")
    dk = d // num_heads
    return _result(
        x.data.reshape(t, num_heads, dk).transpose(1, 0, 2),
        (x,),
        lambda g: (g.transpose(1, 0, 2).reshape(t, d),),
    )


def merge_heads(x: Tensor) -> Tensor:
    """[H x T x d_k] -> [T x H*d_k]; inverse of :func:`split_heads`."""
    if x.ndim != 3:
        raise DimensionError(f"merge_heads expects H x T x d_k, got shape {x.shape}")
    h, t, dk = x.shape
    return _result(
        x.data.transpose(1, 0, 2).reshape(t, h * dk),
        (x,),
        lambda g: (g.reshape(t, h, dk).transpose(1, 0, 2),),
    )


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.sum(x.data), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    if n == 0:
        raise DimensionError("mean_all of an empty tensor")
    return _result(np.mean(x.data), (x,), lambda g: (np.full(shape, g / n),))


def mean_axis(x: Tensor, axis: int = 0) -> Tensor:
    shape = x.shape
    axis = axis % x.ndim
    n = shape[axis]
    if n == 0:
        raise DimensionError("mean over an empty axis")
    return _result(
        x.data.mean(axis=axis),
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g / n, axis), shape).copy(),),
    )


# ---------------------------------------------------------------------------
# elementwise unary


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return _result(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def tanh_elem(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)) without overflow."""
    xd = x.data
    y = np.maximum(xd, 0.0) + np.log1p(np.exp(-np.abs(xd)))
    return _result(y, (x,), lambda g: (g * _sigmoid(xd),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# normalisation


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"softmax over an empty last dimension, shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _result(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def log_softmax_lastdim(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"log_softmax over an empty last dimension, shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _result(y, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def layer_norm_lastdim(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
                       eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise each last-axis slice to zero mean / unit variance, then ``* gamma + beta``."""
    d = x.shape[-1]
    for p in (gamma, beta):
        if p is not None and p.shape != (d,):
            raise DimensionError(f"layer_norm: affine shape {p.shape} does not match last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data if gamma is not None else None
    y = xhat if gd is None else xhat * gd
    if beta is not None:
        y = y + beta.data
    inputs = tuple(t for t in (x, gamma, beta) if t is not None)
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gx_hat = g if gd is None else g * gd
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=lead))
        if beta is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return _result(y, inputs, bw)


# ---------------------------------------------------------------------------
# model-specific


def conv1d_temporal(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Length-preserving 1-D convolution over time with zero padding.

    ``x`` is T x d_in, ``w`` is k x d_in x d_out, ``b`` is d_out.
    ``out[t, o] = b[o] + sum_{j, i} x[t + j - (k-1)/2, i] * w[j, i, o]``.
    """
    if w.ndim != 3:
        raise DimensionError(f"conv1d_temporal: kernel must be k x d_in x d_out, got {w.shape}")
    k, d_in, d_out = w.shape
    if k % 2 == 0:
        raise ConfigError(f"conv1d_temporal: kernel width must be odd, got {k}")
    if x.ndim != 2 or x.shape[1] != d_in or x.shape[0] < 1:
        raise DimensionError(f"conv1d_temporal: input {x.shape} does not match kernel {w.shape}")
    if b.shape != (d_out,):
        raise DimensionError(f"conv1d_temporal: bias {b.shape} does not match kernel {w.shape}")
    t = x.shape[0]
    pad = (k - 1) // 2
    xp = np.zeros((t + 2 * pad, d_in))
    xp[pad:pad + t] = x.data
    cols = np.concatenate([xp[j:j + t] for j in range(k)], axis=1)  # T x (k*d_in)
    wf = w.data.reshape(k * d_in, d_out)
    out = cols @ wf + b.data

    def bw(g):
        gw = (cols.T @ g).reshape(k, d_in, d_out)
        gcols = (g @ wf.T).reshape(t, k, d_in)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[j:j + t] += gcols[:, j]
        return gxp[pad:pad + t], gw, g.sum(axis=0)

    return _result(out, (x, w, b), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout.  ``rate == 0`` returns ``x`` itself."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))
