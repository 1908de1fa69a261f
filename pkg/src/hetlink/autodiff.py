"""Dense float tensors with reverse-mode automatic differentiation.

Forward primitives record a computation graph; calling ``backpropagate`` on a
scalar result accumulates gradients into every participating parameter in a
fixed reverse-topological order, so repeated runs produce bit-identical
gradients.  Float64 is the default precision so finite-difference checks stay
meaningful; float32 is available where speed matters more than checkability.
"""
from __future__ import annotations

import json
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64
CHECKPOINT_FORMAT = 1

# Additive mask value: exp(x - max) underflows to exactly 0.0 for masked slots.
NEG_INF = -1e30


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested primitive."""


def _as_array(data, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(DEFAULT_DTYPE)
    return arr


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{op} produced non-finite values")
    return arr


class Tensor:
    """A dense float array plus the recipe for backpropagating through it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ValueError(
                f"backpropagate requires a scalar loss, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar for readable model code
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A trainable tensor: value plus an always-allocated gradient buffer."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str = "", trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    live = tuple(p for p in parents if p.requires_grad)
    out.requires_grad = bool(live)
    out._parents = live
    out._backward = backward if live else None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    np.add(t.grad, g, out=t.grad)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = _finite(a.data + b.data, "add")
    except ValueError as e:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape}: {e}") from None

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _result(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = _finite(a.data - b.data, "sub")
    except ValueError as e:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape}: {e}") from None

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _result(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = _finite(a.data * b.data, "mul")
    except ValueError as e:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape}: {e}") from None

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _result(data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    data = _finite(a.data * s, "scale")

    def backward(g):
        _accum(a, g * s)

    return _result(data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul requires ndim >= 2 operands, got {a.shape} @ {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ for {a.shape} @ {b.shape}")
    data = _finite(np.matmul(a.data, b.data), "matmul")

    def backward(g):
        _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape))
        _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape))

    return _result(data, (a, b), backward)


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot requires equal-length vectors, got {a.shape}, {b.shape}")
    data = _finite(np.array(np.dot(a.data, b.data)), "dot")

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _result(data, (a, b), backward)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def backward(g):
        _accum(a, g * (a.data > 0))

    return _result(data, (a,), backward)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    data = np.where(a.data > 0, a.data, slope * a.data)

    def backward(g):
        _accum(a, g * np.where(a.data > 0, 1.0, slope))

    return _result(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    t = np.exp(-np.abs(a.data))
    data = np.where(a.data >= 0, 1.0 / (1.0 + t), t / (1.0 + t))

    def backward(g):
        _accum(a, g * data * (1.0 - data))

    return _result(data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        data = _finite(np.exp(a.data), "exp")

    def backward(g):
        _accum(a, g * data)

    return _result(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        data = _finite(np.log(a.data), "log")

    def backward(g):
        _accum(a, g / a.data)

    return _result(data, (a,), backward)


def pow_scalar(a: Tensor, p: float) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        data = _finite(a.data**p, "pow")

    def backward(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _result(data, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        inner = np.sum(g * data, axis=axis, keepdims=True)
        _accum(a, data * (g - inner))

    return _result(data, (a,), backward)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = _finite(np.sum(a.data, axis=axis, keepdims=keepdims), "sum")

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _result(data, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    data = _finite(np.mean(a.data, axis=axis, keepdims=keepdims), "mean")

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g / n, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g / n, a.data.shape).copy())

    return _result(data, (a,), backward)


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concatenate of zero tensors")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for piece, t in zip(np.split(g, splits, axis=axis), tensors):
            _accum(t, piece)

    return _result(data, tuple(tensors), backward)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _result(data, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    data = np.transpose(a.data, axes)
    inverse = np.argsort(axes)

    def backward(g):
        _accum(a, np.transpose(g, inverse))

    return _result(data, (a,), backward)


def getitem(a: Tensor, key) -> Tensor:
    if isinstance(key, (np.ndarray, list)):
        raise ShapeError("fancy indexing not supported; use embedding_lookup/gather_rows")
    data = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] += g
        _accum(a, full)

    return _result(data, (a,), backward)


def embedding_lookup(table: Tensor, indices: np.ndarray) -> Tensor:
    """Rows of ``table`` selected by an integer array of any shape."""
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise ShapeError("embedding_lookup needs integer indices")
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup table must be 2-D, got {table.shape}")
    data = table.data[idx]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        _accum(table, full)

    return _result(data, (table,), backward)


def gather_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """Batched row gather: out[b, k, :] = x[b, indices[b, k], :]."""
    idx = np.asarray(indices)
    if x.ndim != 3 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_rows: x {x.shape} vs indices {idx.shape}")
    rows = np.arange(x.shape[0])[:, None]
    data = x.data[rows, idx]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (rows, idx), g)
        _accum(x, full)

    return _result(data, (x,), backward)


def interleave(nodes: Tensor, conns: Tensor, axis: int) -> Tensor:
    """Weave n node rows and n-1 connection rows into 2n-1 alternating rows."""
    n = nodes.data.shape[axis]
    if conns.data.shape[axis] != n - 1:
        raise ShapeError(
            f"interleave: expected {n - 1} connection rows, got {conns.data.shape[axis]}"
        )
    shape = list(nodes.data.shape)
    shape[axis] = 2 * n - 1
    data = np.zeros(shape, dtype=nodes.data.dtype)
    node_key = [slice(None)] * len(shape)
    node_key[axis] = slice(0, None, 2)
    conn_key = [slice(None)] * len(shape)
    conn_key[axis] = slice(1, None, 2)
    data[tuple(node_key)] = nodes.data
    data[tuple(conn_key)] = conns.data

    def backward(g):
        _accum(nodes, g[tuple(node_key)])
        _accum(conns, g[tuple(conn_key)])

    return _result(data, (nodes, conns), backward)


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    mu = mean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = pow_scalar(add(var, Tensor(np.array(eps))), -0.5)
    return add(mul(mul(centered, inv), gain), bias)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    """log(sum(exp(x))) along ``axis``, stabilized by a detached max shift."""
    m = np.max(x.data, axis=axis, keepdims=True)
    shifted = sub(x, Tensor(m))
    total = tensor_sum(exp(shifted), axis=axis, keepdims=True)
    out = add(log(total), Tensor(m))
    return _squeeze(out, axis)


def _squeeze(t: Tensor, axis: int) -> Tensor:
    shape = list(t.data.shape)
    axis = axis % len(shape)
    del shape[axis]
    return reshape(t, tuple(shape))


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    ss = tensor_sum(mul(x, x), axis=axis, keepdims=True)
    inv = pow_scalar(add(ss, Tensor(np.array(eps))), -0.5)
    return mul(x, inv)


# ---------------------------------------------------------------------------
# spec surface: named-primitive dispatch, backprop entry point, grad checking
# ---------------------------------------------------------------------------

_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "scale": scale,
    "relu": relu,
    "softmax": softmax,
    "layer-normalize": layer_norm,
    "concatenate": lambda *ts, axis=0: concatenate(ts, axis=axis),
    "embedding-lookup": embedding_lookup,
    "dot": dot,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "mean": mean,
}


def apply_primitive(op: str, *inputs, **kwargs) -> Tensor:
    """Apply a primitive by name; raises on unknown names or bad shapes."""
    try:
        fn = _PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}; known: {sorted(_PRIMITIVES)}")
    return fn(*inputs, **kwargs)


def backpropagate(loss: Tensor) -> None:
    """Accumulate gradients of a recorded scalar into all participating tensors."""
    loss.backward()


def check_gradients(
    fn: Callable[[], Tensor], params: Sequence[Parameter], step: float = 1e-5
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must be a deterministic scalar function of ``params`` only.  The
    caller is responsible for evaluation points away from ReLU kinks.
    """
    for p in params:
        p.zero_grad()
    loss = fn()
    loss.backward()
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(fn().data)
            flat[i] = orig - step
            f_minus = float(fn().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            rel = abs(ana_flat[i] - numeric) / max(1.0, abs(numeric))
            if rel > worst:
                worst = rel
    return worst


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays plus a JSON metadata block; exact float64 round-trip."""
    header = json.dumps(
        {"format": CHECKPOINT_FORMAT, "meta": meta or {}}, sort_keys=True
    ).encode("utf-8")
    np.savez(path, __header__=np.frombuffer(header, dtype=np.uint8), **arrays)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path) as npz:
        header = json.loads(bytes(npz["__header__"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format: {header.get('format')}")
        arrays = {k: npz[k] for k in npz.files if k != "__header__"}
    return arrays, header["meta"]
