"""Dense float64 tensors with a define-by-run gradient tape.

Ops record themselves on the active :class:`Graph` whenever one of their
inputs requires a gradient.  Outside a ``with Graph():`` block nothing is
recorded, which is how inference runs.
"""

from __future__ import annotations

import contextlib
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64
COSINE_EPS = 1e-12
MASK_VALUE = -1e9


_dtype = DTYPE


def get_dtype():
    return _dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily build new tensors in ``dtype`` (float64 by default)."""
    global _dtype
    prev, _dtype = _dtype, np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = prev


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_graph")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._graph: Graph | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # sugar so model code reads naturally
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Graph:
    """Ordered op record.  Nodes are appended as ops run, so the list is
    already in topological order."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Graph":
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def record(self, op, inputs, output, backward_fn) -> None:
        output._graph = self
        self.nodes.append(Node(op, tuple(inputs), output, backward_fn))

    def backward(self, root: Tensor) -> None:
        backward(root)


class _State(threading.local):
    def __init__(self):
        self.stack: list[Graph] = []


_state = _State()


def active_graph() -> Graph | None:
    return _state.stack[-1] if _state.stack else None


def _emit(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(out_data)
    graph = active_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        graph.record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    x, y = a.data, b.data
    if y.ndim == 2 and x.ndim > 2:
        # (..., k) @ (k, n): one flat GEMM instead of a batched loop
        lead = x.shape[:-1]
        x2 = x.reshape(-1, x.shape[-1])

        def back_flat(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ y.T).reshape(a.shape) if a.requires_grad else None
            gb = x2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _emit("matmul", (x2 @ y).reshape(lead + (y.shape[1],)), (a, b), back_flat)

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(y, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(x, -1, -2) @ g, b.shape)
        return ga, gb

    return _emit("matmul", x @ y, (a, b), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", a.data + b.data, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def back(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _emit("sub", a.data - b.data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    x, y = a.data, b.data

    def back(g):
        return _unbroadcast(g * y, a.shape), _unbroadcast(g * x, b.shape)

    return _emit("mul", x * y, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return _emit("relu", out, (a,), lambda g: (g * (out > 0),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _emit("swapaxes", np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def exp(a: Tensor) -> Tensor:
    val = np.exp(a.data)
    return _emit("exp", val, (a,), lambda g: (g * val,))


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, slice, type(Ellipsis), type(None))) for p in parts)


def getitem(a: Tensor, index) -> Tensor:
    src = a.shape
    basic = _is_basic_index(index)

    def back(g):
        out = np.zeros(src, dtype=g.dtype)
        if basic:
            out[index] += g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _emit("getitem", a.data[index], (a,), back)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _emit("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return scale(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input list")
    ref = list(tensors[0].shape)
    ax = axis % len(ref)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or other[:ax] + other[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError(f"concat: shapes {tuple(ref)} and {t.shape} do not conform")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=ax))

    return _emit("concat", np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                for t in tensors]
    return concat(expanded, axis=axis)


def embed_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embed_lookup: table shape {table.shape} is not 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embed_lookup: ids out of range for table shape {table.shape}")
    rows = table.shape

    def back(g):
        out = np.zeros(rows, dtype=g.dtype)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, rows[1]))
        return (out,)

    return _emit("embed_lookup", table.data[ids], (table,), back)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layernorm: shapes {x.shape} and {gain.shape}/{bias.shape} do not conform")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    d = x.shape[-1]

    def back(g):
        gx = ggain = gbias = None
        reduce_axes = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            ggain = (g * xhat).sum(axis=reduce_axes)
        if bias.requires_grad:
            gbias = g.sum(axis=reduce_axes)
        if x.requires_grad:
            gh = g * gain.data
            gx = inv / d * (d * gh - gh.sum(-1, keepdims=True) - xhat * (gh * xhat).sum(-1, keepdims=True))
        return gx, ggain, gbias

    return _emit("layernorm", xhat * gain.data + bias.data, (x, gain, bias), back)


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarity between the rows of ``a`` (..., m, d) and
    ``b`` (..., n, d); returns (..., m, n).  The denominator is floored at
    ``COSINE_EPS`` so zero rows give 0 instead of NaN."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"cosine_rows: shapes {a.shape} and {b.shape} do not conform")
    u, v = a.data, b.data
    nu = np.sqrt((u * u).sum(-1))  # (..., m)
    nv = np.sqrt((v * v).sum(-1))  # (..., n)
    dots = u @ np.swapaxes(v, -1, -2)
    prod = nu[..., :, None] * nv[..., None, :]
    denom = np.maximum(prod, COSINE_EPS)
    out = dots / denom
    active = prod > COSINE_EPS  # where the norm product is differentiable

    def back(g):
        ga = gb = None
        gd = g / denom
        # d out / d nu (only where the floor is inactive)
        gprod = np.where(active, -g * out / denom, 0.0)
        if a.requires_grad:
            ga = gd @ v
            gnu = (gprod * nv[..., None, :]).sum(-1)
            ga = ga + gnu[..., None] * np.divide(u, nu[..., None], out=np.zeros_like(u), where=nu[..., None] > 0)
            ga = _unbroadcast(ga, a.shape)
        if b.requires_grad:
            gb = np.swapaxes(gd, -1, -2) @ u
            gnv = (gprod * nu[..., :, None]).sum(-2)
            gb = gb + gnv[..., None] * np.divide(v, nv[..., None], out=np.zeros_like(v), where=nv[..., None] > 0)
            gb = _unbroadcast(gb, b.shape)
        return ga, gb

    return _emit("cosine_rows", out, (a, b), back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"softmax: empty axis {axis} for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", p, (x,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"log_softmax: empty axis {axis} for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", out, (x,), back)


def cross_entropy(logits: Tensor, targets, pad_mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``logits`` (..., V).

    Positions where ``pad_mask`` is true are excluded from the mean.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: shapes {logits.shape} and {targets.shape} do not conform")
    vocab = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise ValueError(f"cross_entropy: target id out of range for vocabulary of {vocab}")
    keep = np.ones(targets.shape, dtype=bool) if pad_mask is None else ~np.asarray(pad_mask, dtype=bool)
    count = int(keep.sum())
    if count == 0:
        raise ValueError("cross_entropy: every target position is padding")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
    nll = (lse - picked) * keep
    loss = nll.sum() / count

    def back(g):
        p = np.exp(z - lse[..., None])
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        return (g * (p - onehot) * keep[..., None] / count,)

    return _emit("cross_entropy", np.asarray(loss), (logits,), back)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every leaf of ``root``'s graph that requires it.

    Leaves that were recorded but do not influence ``root`` get zeros.
    Gradients accumulate into any existing ``.grad``.
    """
    if root.data.size != 1 or root.ndim > 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    graph = root._graph
    if graph is None:
        raise ValueError("backward: root was not produced on an active Graph")

    produced = {id(node.output) for node in graph.nodes}
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape, dtype=root.data.dtype)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(graph.nodes):
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves[id(t)] = t
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi

    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros(leaf.shape, dtype=leaf.data.dtype)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    graph.nodes.clear()


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-4,
               samples: int | None = None, seed: int = 0) -> float:
    """Largest relative disagreement between the tape gradient and central
    differences.

    Relative error is ``|a - n| / max(1, |a|, |n|)``.  Every coordinate of
    every input is probed unless ``samples`` asks for that many coordinates
    drawn uniformly (by ``seed``) across all inputs.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"grad_check: eps {eps} outside [1e-6, 1e-3]")
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)  # probes write through a flat view
        t.requires_grad = True
        t.grad = None
    with Graph():
        out = f(*inputs)
        if out.data.size != 1:
            raise ValueError("grad_check: f must be scalar-valued")
        if not np.isfinite(out.data).all():
            raise ValueError("grad_check: f produced a non-finite value")
        backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    for ga in analytic:
        if not np.isfinite(ga).all():
            raise ValueError("grad_check: non-finite analytic gradient")

    coords = [(k, i) for k, t in enumerate(inputs) for i in range(t.data.size)]
    if samples is not None and samples < len(coords):
        pick = np.random.default_rng(seed).choice(len(coords), size=samples, replace=False)
        coords = [coords[j] for j in sorted(pick.tolist())]

    worst = 0.0
    for k, i in coords:
        flat = inputs[k].data.reshape(-1)
        a = analytic[k].reshape(-1)[i]
        orig = flat[i]
        flat[i] = orig + eps
        plus = float(f(*inputs).data)
        flat[i] = orig - eps
        minus = float(f(*inputs).data)
        flat[i] = orig
        numeric = (plus - minus) / (2 * eps)
        if not np.isfinite(numeric):
            raise ValueError("grad_check: non-finite numeric gradient")
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
    return worst


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

_MAGIC = b"NCK1"


def save_checkpoint(path, params: dict[str, Tensor | np.ndarray]) -> None:
    """Write named arrays as length-prefixed records of little-endian f64."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for name in params:
            arr = params[name]
            arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr, dtype=DTYPE)
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    pos = 4
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape)
        pos += 8 * size
        out[name] = arr.astype(np.float64)
    return out
