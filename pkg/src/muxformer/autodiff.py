"""Dense float tensors with a reverse-mode gradient tape.

Operations run eagerly on numpy arrays. While a :class:`Tape` is active, every
operation that touches a tensor with ``requires_grad`` is recorded together
with a closure computing its vector-Jacobian product. :func:`backward` replays
the tape in reverse.

Broadcasting is limited to adding/multiplying an operand whose shape is a
suffix of the other operand's shape (bias, gain and embedding tables).
"""

from __future__ import annotations

import itertools
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import special

__all__ = [
    "Tensor",
    "Tape",
    "DimensionError",
    "UnsupportedOpError",
    "ContractError",
    "PRIMITIVES",
    "primitive_forward",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "slice",
    "softmax",
    "log_softmax",
    "layernorm",
    "gelu",
    "conv1d",
    "conv2d",
    "embedding",
    "l2_normalize",
]

LAYERNORM_EPS = 1e-5


class DimensionError(ValueError):
    """Operand shapes are incompatible with an operation."""


class UnsupportedOpError(ValueError):
    """A primitive kind that is not implemented was requested."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


_node_ids = itertools.count(1)
_active_tapes: list["Tape"] = []


class Tensor:
    """An n-dimensional float array that may participate in a tape.

    Integer and python-scalar inputs are converted to float32; floating numpy
    arrays keep their dtype so the same code runs in float64 for oracles.
    Treat ``data`` as read-only once created.
    """

    __slots__ = ("data", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
            arr = data
        else:
            arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids) if requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(self, _as_tensor(other, self))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


@dataclass
class Record:
    """One recorded operation: its kind, operand/output ids and VJP closure."""

    kind: str
    input_ids: tuple[int | None, ...]
    output_id: int
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; operations executed inside the ``with`` block are
    recorded in execution order, which is already a topological order.
    ``macs`` accumulates multiply-accumulate counts per op kind for every
    operation executed while the tape is active.
    """

    def __init__(self):
        self.records: list[Record] = []
        self.leaves: dict[int, Tensor] = {}
        self.macs: dict[str, int] = defaultdict(int)
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            if t.requires_grad and t.node_id is not None:
                self.leaves.setdefault(t.node_id, t)

    def total_macs(self, kinds: Sequence[str] = ("matmul", "conv1d", "conv2d")) -> int:
        return int(math.fsum(self.macs[k] for k in kinds))


def _emit(kind: str, data: np.ndarray, inputs: Sequence[Tensor], vjp, macs: int = 0) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.node_id = None
    tape = _active_tapes[-1] if _active_tapes else None
    if tape is None:
        return out
    tape.macs[kind] += macs
    if any(t.requires_grad for t in inputs):
        for t in inputs:
            if t.requires_grad and t.node_id not in tape._outputs:
                tape.leaves.setdefault(t.node_id, t)
        out.requires_grad = True
        out.node_id = next(_node_ids)
        tape.records.append(Record(kind, tuple(t.node_id for t in inputs), out.node_id, vjp))
        tape._outputs.add(out.node_id)
    return out


def _suffix_broadcast(a: Tensor, b: Tensor, kind: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise DimensionError(f"{kind}: shape {b.shape} cannot be broadcast onto {a.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _suffix_broadcast(a, b, "add")
    sb = b.shape
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _suffix_broadcast(a, b, "sub")
    sb = b.shape
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -_reduce_to(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _suffix_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    sb = b.shape

    def vjp(g):
        return g * bd, _reduce_to(g * ad, sb)

    return _emit("mul", ad * bd, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    cdf = 0.5 * (1.0 + special.erf(xd / np.sqrt(2.0).astype(xd.dtype)))

    def vjp(g):
        pdf = np.exp(-0.5 * xd * xd) / xd.dtype.type(math.sqrt(2.0 * math.pi))
        return (g * (cdf + xd * pdf),)

    return _emit("gelu", xd * cdf, (x,), vjp)


# ------------------------------------------------------------------- matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared weight, applied to every leading index of
    ``a``) or has exactly the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch axes differ for {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    macs = int(np.prod(out.shape)) * a.shape[-1]

    if bd.ndim == 2:
        def vjp(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    else:
        def vjp(g):
            return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _emit("matmul", out, (a, b), vjp, macs)


# --------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.asarray(out), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    shape = a.shape
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / g.dtype.type(count), shape).copy(),)

    return _emit("mean", np.asarray(out, dtype=a.dtype), (a,), vjp)


# ------------------------------------------------------------ shape changes


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from exc
    old = a.shape
    return _emit("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation for {a.shape}")
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat: no operands")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis
        ):
            raise DimensionError(
                f"concat: shapes {[x.shape for x in tensors]} differ off axis {axis}"
            )
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return _emit("concat-axis", np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), vjp)


def slice(a: Tensor, axis: int, start: int, stop: int) -> Tensor:  # noqa: A001
    axis = axis % a.ndim
    if not 0 <= start <= stop <= a.shape[axis]:
        raise DimensionError(f"slice: [{start}:{stop}] out of range for axis {axis} of {a.shape}")
    index = [np.s_[:]] * a.ndim
    index[axis] = np.s_[start:stop]
    index = tuple(index)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _emit("slice", np.ascontiguousarray(a.data[index]), (a,), vjp)


# ------------------------------------------------------------ normalisation


def softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax-lastaxis", y, (a,), vjp)


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def vjp(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _emit("log-softmax", y, (a,), vjp)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalise over the last axis; variance is floored at ``eps``.

    A constant input therefore maps to exactly ``bias``.
    """
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layernorm: affine shapes {gain.shape}, {bias.shape} for width {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    floored = var <= eps
    denom = np.sqrt(np.maximum(var, xd.dtype.type(eps)))
    xhat = xc / denom
    gd = gain.data

    def vjp(g):
        dxhat = g * gd
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        m2 = np.where(floored, 0, m2).astype(g.dtype)
        dx = (dxhat - m1 - xhat * m2) / denom
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit("layernorm", xhat * gd + bias.data, (x, gain, bias), vjp)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, xd.dtype.type(eps))
    y = xd / norm

    def vjp(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _emit("l2-normalize", y, (x,), vjp)


# ---------------------------------------------------------------- conv/embed


def conv1d(x: Tensor, weight: Tensor, stride: int = 1) -> Tensor:
    """Convolution along the token axis of a channels-last sequence.

    ``x`` is (batch, length, in), ``weight`` is (kernel, in, out); no padding.
    """
    if x.ndim != 3 or weight.ndim != 3:
        raise DimensionError(f"conv1d: expected (b, L, C) and (K, C, O), got {x.shape}, {weight.shape}")
    b, length, cin = x.shape
    k, wcin, cout = weight.shape
    if wcin != cin:
        raise DimensionError(f"conv1d: input channels {cin} != weight channels {wcin}")
    if stride < 1 or k > length or length % stride != 0 or (length - k) % stride != 0:
        raise DimensionError(
            f"conv1d: length {length} incompatible with kernel {k} and stride {stride}"
        )
    lout = (length - k) // stride + 1
    xd, wd = x.data, weight.data
    span = stride * (lout - 1) + 1
    cols = np.stack([xd[:, j:j + span:stride, :] for j in range(k)], axis=2)
    cols = cols.reshape(b, lout, k * cin)
    wmat = wd.reshape(k * cin, cout)
    out = cols @ wmat
    macs = b * lout * k * cin * cout

    def vjp(g):
        gw = (cols.reshape(-1, k * cin).T @ g.reshape(-1, cout)).reshape(k, cin, cout)
        gcols = (g @ wmat.T).reshape(b, lout, k, cin)
        gx = np.zeros_like(xd)
        for j in range(k):
            gx[:, j:j + span:stride, :] += gcols[:, :, j, :]
        return gx, gw

    return _emit("conv1d", out, (x, weight), vjp, macs)


def conv2d(x: Tensor, weight: Tensor, stride: int = 1) -> Tensor:
    """NCHW convolution without padding; ``weight`` is (out, in, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-D operands, got {x.shape}, {weight.shape}")
    b, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise DimensionError(f"conv2d: input channels {cin} != weight channels {wcin}")
    if kh > h or kw > w or (h - kh) % stride or (w - kw) % stride:
        raise DimensionError(
            f"conv2d: spatial size {(h, w)} incompatible with kernel {(kh, kw)} and stride {stride}"
        )
    ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
    xd, wd = x.data, weight.data
    sh, sw = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    # cols: (b, ho, wo, cin, kh, kw)
    cols = np.empty((b, ho, wo, cin, kh, kw), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[..., i, j] = xd[:, :, i:i + sh:stride, j:j + sw:stride].transpose(0, 2, 3, 1)
    cols = cols.reshape(b * ho * wo, cin * kh * kw)
    wmat = wd.reshape(cout, cin * kh * kw)
    out = (cols @ wmat.T).reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)
    macs = b * ho * wo * cout * cin * kh * kw

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(cout, cin, kh, kw)
        gcols = (g2 @ wmat).reshape(b, ho, wo, cin, kh, kw)
        gx = np.zeros_like(xd)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + sh:stride, j:j + sw:stride] += gcols[..., i, j].transpose(0, 3, 1, 2)
        return gx, gw

    return _emit("conv2d", np.ascontiguousarray(out), (x, weight), vjp, macs)


def embedding(table: Tensor, indices) -> Tensor:
    """Gather rows of ``table`` (vocab, dim) at integer ``indices``."""
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise DimensionError(f"embedding: indices must be integers, got {idx.dtype}")
    if table.ndim != 2:
        raise DimensionError(f"embedding: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DimensionError(f"embedding: index out of range for table of {table.shape[0]} rows")
    shape = table.shape

    def vjp(g):
        gt = np.zeros(shape, dtype=g.dtype)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, shape[1]))
        return (gt,)

    return _emit("embedding-lookup", table.data[idx], (table,), vjp)


# ----------------------------------------------------------------- dispatch

PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "matmul": matmul,
    "sum": sum,
    "mean": mean,
    "reshape": reshape,
    "transpose": transpose,
    "concat-axis": lambda *ts, axis=0: concat(ts, axis=axis),
    "slice": slice,
    "softmax-lastaxis": softmax,
    "log-softmax": log_softmax,
    "layernorm": layernorm,
    "l2-normalize": l2_normalize,
    "gelu": gelu,
    "conv1d": conv1d,
    "conv2d": conv2d,
    "embedding-lookup": embedding,
}


def primitive_forward(kind: str, *inputs, **attrs) -> Tensor:
    """Run the primitive named ``kind``; attributes are passed as keywords."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise UnsupportedOpError(f"unsupported primitive kind {kind!r}") from None
    return fn(*inputs, **attrs)


# ----------------------------------------------------------------- backward


def backward(loss: Tensor, tape: Tape, wrt: Sequence[Tensor] = ()) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``loss`` for every leaf seen by ``tape``.

    Leaves listed in ``wrt`` that the loss does not depend on get zeros.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss.node_id is None:
        raise ContractError("backward: loss is not recorded on the tape")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    leaf_ids = set(tape.leaves)
    for rec in reversed(tape.records):
        g = grads.get(rec.output_id)
        if g is None:
            continue
        if rec.output_id not in leaf_ids:
            del grads[rec.output_id]
        for nid, gi in zip(rec.input_ids, rec.vjp(g)):
            if nid is None or gi is None:
                continue
            prev = grads.get(nid)
            grads[nid] = gi if prev is None else prev + gi
    result = {}
    for nid, leaf in tape.leaves.items():
        result[nid] = grads.get(nid, np.zeros_like(leaf.data))
    for t in wrt:
        if t.node_id is not None and t.node_id not in result:
            result[t.node_id] = grads.get(t.node_id, np.zeros_like(t.data))
    if loss.node_id in tape.leaves:
        result[loss.node_id] = np.ones_like(loss.data)
    return result
