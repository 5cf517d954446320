"""Minimal reverse-mode array engine.

Dense numpy-backed tensors plus a Wengert-list tape. Ops executed inside a
``with Tape()`` block are recorded in execution order; ``Tape.backward``
replays them reversed, which visits nodes in reverse topological order and
accumulates each node's gradient over all of its consumers. Ops executed
with no active tape just compute values (inference path).

Two precisions are supported: float32 for training, float64 for
verification (finite-difference gradient checks are unreliable in 32-bit).
Every primitive validates that its output is finite and raises
``NonFiniteError`` otherwise; NaN/Inf never propagate silently.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "matmul",
    "add",
    "mul",
    "scale",
    "concat",
    "transpose",
    "reshape",
    "tile_leading",
    "diagonal",
    "embedding_lookup",
    "gelu",
    "exp",
    "log",
    "softmax_lastdim",
    "logsumexp_lastdim",
    "layernorm",
    "l2_normalize_lastdim",
    "tensor_sum",
    "mean",
    "numeric_gradient",
    "check_gradient",
]

_FLOAT_DTYPES = (np.float32, np.float64)
NEG_INF_BIAS = -1e9  # additive pre-softmax bias for disallowed attention slots


class ShapeError(ValueError):
    """Operand shapes (or dtypes) are incompatible with an op's contract."""


class NonFiniteError(ArithmeticError):
    """An op produced NaN/Inf from its inputs."""


_node_counter = itertools.count(1)

# Single active tape (ops are pure and single-threaded by contract).
_active_tape: "Tape | None" = None


class Tensor:
    """Dense row-major array tracked by node id.

    ``data`` is always a float32 or float64 ndarray. Python scalars and
    lists default to float32; pass ``dtype=np.float64`` for the
    verification mode.
    """

    __slots__ = ("data", "nid")

    def __init__(self, data, dtype=None):
        if dtype is None:
            if isinstance(data, (np.ndarray, np.floating)) and data.dtype in _FLOAT_DTYPES:
                arr = np.asarray(data)
            else:
                arr = np.asarray(data, dtype=np.float32)
        else:
            arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            raise ShapeError(f"tensor dtype must be float32/float64, got {arr.dtype}")
        self.data = arr
        self.nid = next(_node_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # Operator sugar; all routed through the recorded primitives.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add(self, scale(_as_tensor(other, self.dtype), -1.0))
        return add(self, scale(other, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


class Parameter(Tensor):
    """Named trainable tensor; ``grad`` is filled in by ``Tape.backward``."""

    __slots__ = ("name", "grad")

    def __init__(self, name: str, data, dtype=None):
        super().__init__(data, dtype=dtype)
        self.name = name
        self.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


class Tape:
    """Ordered record of primitive ops and their gradient accumulators.

    Records are appended in execution order, so iterating them reversed is
    a reverse topological walk of the computation graph. ``grads`` is keyed
    by node id; a node's gradient is the sum of contributions from every
    consumer, accumulated before the node's own record is replayed.
    """

    def __init__(self):
        self._records = []  # (out_nid, parents, vjp) in execution order
        self._params: dict[int, Parameter] = {}
        self.grads: dict[int, np.ndarray] = {}

    def __enter__(self):
        global _active_tape
        if _active_tape is not None:
            raise RuntimeError("a Tape is already active (tapes do not nest)")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = None
        return False

    def _record(self, out: Tensor, parents: tuple[Tensor, ...], vjp):
        self._records.append((out.nid, parents, vjp))
        for p in parents:
            if isinstance(p, Parameter):
                self._params.setdefault(p.nid, p)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Replay the tape in reverse from a scalar loss node.

        Fills ``grads`` for every reachable node and sets ``.grad`` on every
        Parameter that was touched during the forward pass (zeros if the
        loss does not depend on it).
        """
        if not isinstance(loss, Tensor) or loss.data.ndim != 0:
            got = getattr(loss, "shape", type(loss))
            raise ShapeError(f"backward requires a scalar loss node, got shape {got}")
        grads = {loss.nid: np.ones((), dtype=loss.data.dtype)}
        for out_nid, parents, vjp in reversed(self._records):
            g = grads.get(out_nid)
            if g is None:
                continue
            for parent, pg in zip(parents, vjp(g)):
                if pg is None:
                    continue
                acc = grads.get(parent.nid)
                grads[parent.nid] = pg if acc is None else acc + pg
        self.grads = grads
        for p in self._params.values():
            g = grads.get(p.nid)
            p.grad = np.zeros_like(p.data) if g is None else g
        return grads

    def grad(self, t: Tensor) -> np.ndarray:
        g = self.grads.get(t.nid)
        return np.zeros_like(t.data) if g is None else g


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_same_dtype(op: str, *arrays):
    dt = arrays[0].dtype
    for a in arrays[1:]:
        if a.dtype != dt:
            raise ShapeError(f"{op}: mixed dtypes {dt} and {a.dtype}")


def _emit(op: str, out_data, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out_data = np.asarray(out_data)
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(out_data)
    if _active_tape is not None:
        _active_tape._record(out, parents, vjp)
    return out


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; stacked leading dims follow numpy matmul rules."""
    _check_same_dtype("matmul", a.data, b.data)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} x {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = _reduce_to(np.matmul(g, b.data.swapaxes(-1, -2)), a.data.shape)
        gb = _reduce_to(np.matmul(a.data.swapaxes(-1, -2), g), b.data.shape)
        return ga, gb

    return _emit("matmul", out, (a, b), vjp)


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; broadcasting limited to numpy-compatible shapes."""
    b = _as_tensor(b, a.dtype)
    _check_same_dtype("add", a.data, b.data)
    try:
        out = a.data + b.data
    except ValueError as err:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from err

    def vjp(g):
        return _reduce_to(g, a.data.shape), _reduce_to(g, b.data.shape)

    return _emit("add", out, (a, b), vjp)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _check_same_dtype("mul", a.data, b.data)
    try:
        out = a.data * b.data
    except ValueError as err:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from err

    def vjp(g):
        return _reduce_to(g * b.data, a.data.shape), _reduce_to(g * a.data, b.data.shape)

    return _emit("mul", out, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * a.data.dtype.type(c)

    def vjp(g):
        return (g * a.data.dtype.type(c),)

    return _emit("scale", out, (a,), vjp)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    _check_same_dtype("concat", *[t.data for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit("concat", out, tuple(tensors), vjp)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inverse),)

    return _emit("transpose", out, (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _emit("reshape", out, (a,), vjp)


def tile_leading(a: Tensor, n: int) -> Tensor:
    """Repeat a tensor n times along a new leading axis."""
    out = np.repeat(a.data[None], n, axis=0)

    def vjp(g):
        return (g.sum(axis=0),)

    return _emit("tile_leading", out, (a,), vjp)


def slice_(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing with slices/ints; backward scatters."""
    out = a.data[key]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _emit("slice", np.ascontiguousarray(out), (a,), vjp)


def diagonal(a: Tensor) -> Tensor:
    if a.data.ndim != 2 or a.data.shape[0] != a.data.shape[1]:
        raise ShapeError(f"diagonal needs a square 2-d input, got {a.shape}")
    out = np.ascontiguousarray(np.diagonal(a.data))

    def vjp(g):
        full = np.zeros_like(a.data)
        np.fill_diagonal(full, g)
        return (full,)

    return _emit("diagonal", out, (a,), vjp)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-d table by integer id; backward scatter-adds."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"embedding ids must be integers, got {ids.dtype}")
    if table.data.ndim != 2:
        raise ShapeError(f"embedding table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(
            f"embedding id out of range [0, {table.data.shape[0]}): "
            f"min {ids.min()}, max {ids.max()}"
        )
    out = table.data[ids]

    def vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _emit("embedding_lookup", out, (table,), vjp)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    out = (0.5 * x * (1.0 + t)).astype(x.dtype)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return ((g * d).astype(x.dtype),)

    return _emit("gelu", out, (a,), vjp)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _emit("exp", out, (a,), vjp)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _emit("log", out, (a,), vjp)


def softmax_lastdim(a: Tensor) -> Tensor:
    """Row softmax along the last axis, stabilized by max subtraction."""
    if a.data.shape[-1] < 1:
        raise ShapeError("softmax needs a non-empty last axis")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _emit("softmax_lastdim", out, (a,), vjp)


def logsumexp_lastdim(a: Tensor) -> Tensor:
    """log(sum(exp(x))) along the last axis, stabilized; backward is softmax."""
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (np.log(s) + m).reshape(a.data.shape[:-1])
    soft = e / s

    def vjp(g):
        return (g[..., None] * soft,)

    return _emit("logsumexp_lastdim", out, (a,), vjp)


def layernorm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis followed by an affine map."""
    d = a.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layernorm gain/bias must have shape ({d},), got {gain.shape}/{bias.shape}"
        )
    _check_same_dtype("layernorm", a.data, gain.data, bias.data)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    sigma = np.sqrt(var + a.data.dtype.type(eps))
    xhat = xc / sigma
    out = xhat * gain.data + bias.data

    def vjp(g):
        dxhat = g * gain.data
        dx = (dxhat - dxhat.mean(axis=-1, keepdims=True)
              - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) / sigma
        axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=axes)
        dbias = g.sum(axis=axes)
        return dx.astype(a.data.dtype), dgain, dbias

    return _emit("layernorm", out, (a, gain, bias), vjp)


def l2_normalize_lastdim(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide each row by max(its L2 norm, eps)."""
    n = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    denom = np.maximum(n, a.data.dtype.type(eps))
    out = a.data / denom
    live = n > eps

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        g_live = (g - out * inner) / denom
        g_dead = g / denom
        return (np.where(live, g_live, g_dead).astype(a.data.dtype),)

    return _emit("l2_normalize_lastdim", out, (a,), vjp)


def tensor_sum(a: Tensor) -> Tensor:
    out = a.data.sum()

    def vjp(g):
        return (np.full_like(a.data, g),)

    return _emit("sum", np.asarray(out), (a,), vjp)


def mean(a: Tensor) -> Tensor:
    out = a.data.mean()
    inv = 1.0 / a.data.size

    def vjp(g):
        return (np.full_like(a.data, g * inv),)

    return _emit("mean", np.asarray(out), (a,), vjp)


# ---------------------------------------------------------------------------
# numeric verification helpers (64-bit mode)


def numeric_gradient(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function at a float64 point."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f(x))
        flat[i] = orig - step
        lo = float(f(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def check_gradient(f, x: np.ndarray, step: float = 1e-5) -> float:
    """Max relative error between taped and finite-difference gradients.

    ``f`` maps a float64 ndarray to a scalar Tensor using recorded ops.
    The relative error of a coordinate is |a - n| / max(1, |a|, |n|).
    """
    x = np.asarray(x, dtype=np.float64)
    leaf = Tensor(x.copy())
    with Tape() as tape:
        loss = f(leaf)
    tape.backward(loss)
    analytic = tape.grad(leaf)
    numeric = numeric_gradient(lambda v: f(Tensor(v)).item(), x, step=step)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float((np.abs(analytic - numeric) / denom).max())
