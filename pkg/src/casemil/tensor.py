"""Minimal reverse-mode autodiff over float64 numpy arrays.

Only the primitives the case-level model needs are provided. Every op records
a backward closure on the output tensor; ``backward`` walks the recorded graph
in reverse topological order and accumulates gradients into leaves.
"""
from __future__ import annotations

import contextlib
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

OP_KINDS = (
    "matmul", "conv2d", "relu", "tanh", "sigmoid", "softmax", "exp", "log",
    "add", "sub", "mul", "sum", "mean", "max", "topk", "concat", "abs", "scale",
    "reshape", "index",
)

_grad_enabled = True
# op_kind -> multiplier applied to that op's input gradients; test hook only
_GRAD_FAULTS: dict[str, float] = {}
# active kink recorders: each collects (op_kind, distance of an input to its nearest kink)
_KINK_LOGS: list[list] = []


class ShapeError(ValueError):
    def __init__(self, op: str, *shapes, detail: str = ""):
        shp = ", ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {shp}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op
        self.shapes = shapes


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def inject_fault(op_kind: str, factor: float = 1.5):
    """Scale the gradient of one op kind; used to prove the checker can fail."""
    _GRAD_FAULTS[op_kind] = factor
    try:
        yield
    finally:
        _GRAD_FAULTS.pop(op_kind, None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "retain_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) or data.dtype != DTYPE else data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.retain_grad = False
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op: str | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """Trainable leaf tensor, registered under a unique name and component."""

    __slots__ = ("name", "component_id")

    def __init__(self, data, name: str, component_id: str):
        super().__init__(data, requires_grad=True)
        if not component_id:
            raise ValueError(f"parameter {name!r} needs a component id")
        self.name = name
        self.component_id = component_id

    def __repr__(self):
        return f"Parameter({self.name!r}, component={self.component_id!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, op: str, parents: tuple[Tensor, ...], fn) -> Tensor:
    out = Tensor(out_data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _record(a.data + b.data, "add", (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _record(a.data - b.data, "sub", (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _record(a.data * b.data, "mul", (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record(a.data * c, "scale", (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    if _KINK_LOGS and a.data.size:
        _log_kink("relu", np.abs(a.data).min())
    return _record(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _record(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(y, "sigmoid", (a,), lambda g: (g * y * (1.0 - y),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _record(y, "exp", (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _record(np.log(x), "log", (a,), lambda g: (g / x,))


@contextlib.contextmanager
def kink_margins():
    """Collect how close relu/abs/max/topk inputs come to a non-differentiable point.

    Yields a list of (op_kind, margin) pairs. The margin is the smallest |x| for relu/abs
    and the smallest nonzero gap between a selected entry and the best unselected one for
    max/topk.
    """
    log: list = []
    _KINK_LOGS.append(log)
    try:
        yield log
    finally:
        _KINK_LOGS.remove(log)


def _log_kink(op: str, margin: float):
    for log in _KINK_LOGS:
        log.append((op, float(margin)))


def _selection_gap(x: np.ndarray, k: int, axis: int):
    n = x.shape[axis]
    if n <= k:
        return
    part = -np.sort(-x, axis=axis)
    gap = np.take(part, k - 1, axis=axis) - np.take(part, k, axis=axis)
    # exact ties are structural (e.g. several dead relu units at 0) and move together
    gap = gap[gap > 0]
    if gap.size:
        _log_kink("topk" if k > 1 else "max", gap.min())


def abs_(a) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.data)
    if _KINK_LOGS and a.data.size:
        _log_kink("abs", np.abs(a.data).min())
    return _record(np.abs(a.data), "abs", (a,), lambda g: (g * s,))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, "softmax", (a,), fn)


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(ax % ndim for ax in axes)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    y = a.data.sum(axis=axes, keepdims=keepdims)

    def fn(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(np.asarray(y, dtype=DTYPE), "sum", (a,), fn)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = a.data.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))
    y = a.data.mean(axis=axes, keepdims=keepdims)

    def fn(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _record(np.asarray(y, dtype=DTYPE), "mean", (a,), fn)


def max_(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Max reduction; the gradient goes to the first maximal entry only."""
    a = as_tensor(a)
    if _KINK_LOGS:
        _selection_gap(a.data.reshape(-1) if axis is None else a.data, 1, -1 if axis is None else axis)
    if axis is None:
        flat = a.data.reshape(-1)
        i = int(np.argmax(flat))

        def fn_flat(g):
            out = np.zeros(flat.shape)
            out[i] = np.asarray(g).reshape(-1)[0]
            return (out.reshape(a.shape),)

        y = flat[i]
        if keepdims:
            y = np.reshape(y, (1,) * a.ndim)
        return _record(np.asarray(y, dtype=DTYPE), "max", (a,), fn_flat)

    axis = axis % a.ndim
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    y = np.take_along_axis(a.data, idx, axis=axis)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        out = np.zeros(a.shape)
        np.put_along_axis(out, idx, g, axis=axis)
        return (out,)

    return _record(y if keepdims else np.squeeze(y, axis), "max", (a,), fn)


def argtopk(x: np.ndarray, k: int, axis: int = -1) -> np.ndarray:
    """Indices of the k largest entries along ``axis``, descending; ties keep the lower index."""
    n = x.shape[axis]
    if k > n:
        raise ValueError(f"topk: k={k} exceeds axis extent {n}")
    if k < 1:
        raise ValueError(f"topk: k must be >= 1, got {k}")
    order = np.argsort(-x, axis=axis, kind="stable")
    return np.take(order, np.arange(k), axis=axis)


def topk(a, k: int, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    axis = axis % a.ndim
    idx = argtopk(a.data, k, axis)
    if _KINK_LOGS:
        _selection_gap(a.data, k, axis)
    y = np.take_along_axis(a.data, idx, axis=axis)

    def fn(g):
        out = np.zeros(a.shape)
        np.put_along_axis(out, idx, g, axis=axis)
        return (out,)

    return _record(y, "topk", (a,), fn)


# ---------------------------------------------------------------- structure

def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat: no inputs")
    nd = ts[0].ndim
    axis = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[d] != ts[0].shape[d] for d in range(nd) if d != axis):
            raise ShapeError("concat", *[t.shape for t in ts], detail=f"axis={axis}")
    y = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def fn(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts)))

    return _record(y, "concat", tuple(ts), fn)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    axis = axis % (ts[0].ndim + 1)
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts], axis=axis)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _record(y, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def index(a, idx) -> Tensor:
    a = as_tensor(a)
    y = a.data[idx]

    def fn(g):
        out = np.zeros(a.shape)
        np.add.at(out, idx, g)
        return (out,)

    return _record(np.array(y, dtype=DTYPE), "index", (a,), fn)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        y = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _record(y, "matmul", (a, b), fn)


def _conv_out(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. x: (N, C, H, W), w: (O, C, kh, kw); no bias."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh, ow = _conv_out(h, kh, stride, padding), _conv_out(wd, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError("conv2d", x.shape, w.shape, detail="kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = np.empty((n, c, kh, kw, oh, ow))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    cols = cols.reshape(n, c * kh * kw, oh * ow)
    wr = w.data.reshape(o, -1)
    y = np.matmul(wr, cols).reshape(n, o, oh, ow)

    def fn(g):
        g2 = g.reshape(n, o, oh * ow)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wr.T, g2).reshape(n, c, kh, kw, oh, ow)
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        return gx, gw

    return _record(y, "conv2d", (x, w), fn)


# ---------------------------------------------------------------- dispatch

_UNARY = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid, "exp": exp, "log": log, "abs": abs_}
_BINARY = {"add": add, "sub": sub, "mul": mul, "matmul": matmul}


def apply(op_kind: str, inputs: Sequence, attrs: dict | None = None) -> Tensor:
    """Generic entry point: ``apply("softmax", [x], {"axis": 0})``."""
    attrs = dict(attrs or {})
    if op_kind in _UNARY:
        return _UNARY[op_kind](inputs[0])
    if op_kind in _BINARY:
        return _BINARY[op_kind](inputs[0], inputs[1])
    if op_kind == "conv2d":
        return conv2d(inputs[0], inputs[1], stride=attrs.get("stride", 1), padding=attrs.get("padding", 0))
    if op_kind == "softmax":
        return softmax(inputs[0], axis=attrs.get("axis", -1))
    if op_kind == "sum":
        return sum_(inputs[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))
    if op_kind == "mean":
        return mean(inputs[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))
    if op_kind == "max":
        return max_(inputs[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))
    if op_kind == "topk":
        return topk(inputs[0], attrs["k"], axis=attrs.get("axis", -1))
    if op_kind == "concat":
        return concat(inputs, axis=attrs.get("axis", 0))
    if op_kind == "scale":
        return scale(inputs[0], attrs["c"])
    if op_kind == "reshape":
        return reshape(inputs[0], attrs["shape"])
    if op_kind == "index":
        return index(inputs[0], attrs["idx"])
    raise ValueError(f"unknown op kind {op_kind!r}")


# ---------------------------------------------------------------- backward

def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of Parameters and flagged tensors."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None or node.retain_grad:
            if isinstance(node, Parameter) or node.retain_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
        in_grads = node._backward(g)
        fault = _GRAD_FAULTS.get(node._op)
        for p, pg in zip(node._parents, in_grads):
            if pg is None or not p.requires_grad:
                continue
            if fault is not None:
                pg = pg * fault
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg


# ---------------------------------------------------------------- verification

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between backprop and central differences of ``f`` at ``x``.

    ``x.data`` is perturbed in place and restored; ``f`` must read it on each call.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not np.all(np.isfinite(x.data)):
        bad = np.argwhere(~np.isfinite(x.data))[0]
        raise FloatingPointError(f"non-finite input at entry {tuple(bad)}")
    saved = (x.requires_grad, x.retain_grad, x.grad)
    x.requires_grad, x.retain_grad, x.grad = True, True, None
    try:
        with np.errstate(all="ignore"):
            out = f(x)
            if out.data.size != 1:
                raise ValueError("grad_check needs a scalar-valued function")
            backward(out)
        analytic = np.zeros(x.shape) if x.grad is None else x.grad.copy()
        # blame the entry whose own derivative blows up before probing anything
        if not np.all(np.isfinite(analytic)):
            bad = np.argwhere(~np.isfinite(analytic))[0]
            raise FloatingPointError(f"non-finite analytic gradient at entry {tuple(int(i) for i in bad)}")
        if not np.isfinite(out.item()):
            raise FloatingPointError("non-finite function value at the unperturbed input")
        numeric = np.zeros(x.shape)
        flat = x.data.reshape(-1)
        with no_grad(), np.errstate(all="ignore"):
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(x).item()
                flat[i] = orig - eps
                fm = f(x).item()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    entry = tuple(int(j) for j in np.unravel_index(i, x.shape))
                    raise FloatingPointError(f"non-finite function value when probing entry {entry}")
                numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)
    finally:
        x.requires_grad, x.retain_grad, x.grad = saved
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x.data.size else 0.0


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"CMILPRM1"


def save_parameters(params: Iterable[Parameter], path) -> None:
    """Write parameters to ``path`` plus a plain-text ``path.index`` of names in order."""
    path = Path(path)
    params = list(params)
    buf = bytearray(_MAGIC)
    buf += struct.pack("<Q", len(params))
    for p in params:
        for s in (p.name, p.component_id):
            b = s.encode("utf-8")
            buf += struct.pack("<I", len(b)) + b
        buf += struct.pack("<I", p.data.ndim)
        buf += struct.pack(f"<{p.data.ndim}Q", *p.data.shape)
        buf += np.ascontiguousarray(p.data, dtype="<f8").tobytes()
    path.write_bytes(bytes(buf))
    Path(str(path) + ".index").write_text("".join(p.name + "\n" for p in params), encoding="utf-8")


def load_parameters(path) -> list[Parameter]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    (count,) = struct.unpack_from("<Q", raw, 8)
    off = 16
    out = []
    for _ in range(count):
        strs = []
        for _ in range(2):
            (ln,) = struct.unpack_from("<I", raw, off)
            off += 4
            strs.append(raw[off:off + ln].decode("utf-8"))
            off += ln
        (nd,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{nd}Q", raw, off)
        off += 8 * nd
        size = int(np.prod(shape)) if nd else 1
        data = np.frombuffer(raw, dtype="<f8", count=size, offset=off).astype(DTYPE).reshape(shape)
        off += 8 * size
        out.append(Parameter(data, strs[0], strs[1]))
    return out
