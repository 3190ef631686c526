"""Dense float64 tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps an immutable ``numpy`` array. When tracing is enabled
(the default) and at least one operand requires a gradient, every operation
records its parents and a local gradient rule, so :func:`backward` can walk the
resulting tape in reverse topological order.

Broadcasting is deliberately restricted: elementwise binary ops accept equal
shapes or a scalar operand. Ops that need a structured broadcast (biases,
per-channel modulation) are provided as dedicated functions.
"""

from __future__ import annotations

import contextlib
import json
import threading
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "TapeError",
    "ShapeError",
    "no_grad",
    "is_tracing",
    "tensor",
    "backward",
    "grad",
    "check_gradient",
    "conv2d",
    "linear",
    "film",
    "avg_pool2",
    "upsample2",
    "concat",
    "l2_normalize",
    "clip",
    "log_softmax",
    "save_tensors",
    "load_tensors",
]


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class TapeError(RuntimeError):
    """Backward was requested on something the tape cannot differentiate."""


_state = threading.local()


def is_tracing() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    prev = is_tracing()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise FloatingPointError(f"non-finite values produced by {op!r}")


class Tensor:
    """Immutable float64 array plus an optional tape node."""

    __slots__ = ("data", "requires_grad", "op", "_parents", "_rule")
    __array_priority__ = 1000  # keep ndarray.__mul__ from hijacking tensor ops

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf"):
        arr = np.array(data, dtype=np.float64)  # always copies
        if arr.ndim == 0:
            arr = arr.reshape(1)
        _check_finite(arr, op)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._rule: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], rule, op: str) -> "Tensor":
        out = cls.__new__(cls)
        data = np.asarray(data, dtype=np.float64)
        if data.ndim == 0:
            data = data.reshape(1)
        _check_finite(data, op)
        data.setflags(write=False)
        out.data = data
        out.op = op
        if is_tracing() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._rule = rule
        else:
            out.requires_grad = False
            out._parents = ()
            out._rule = None
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- elementwise arithmetic -----------------------------------------
    def __add__(self, other):
        return _binary(self, other, "add")

    def __radd__(self, other):
        return _binary(self, other, "add")

    def __sub__(self, other):
        return _binary(self, other, "sub")

    def __rsub__(self, other):
        return _binary(_as_tensor(other), self, "sub")

    def __mul__(self, other):
        return _binary(self, other, "mul")

    def __rmul__(self, other):
        return _binary(self, other, "mul")

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a Python scalar")
        return _binary(self, 1.0 / float(other), "mul")

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _slice(self, index)

    # -- unary ops -----------------------------------------------------
    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor._from_op(self.data * mask, (self,), lambda g: (g * mask,), "relu")

    def tanh(self) -> "Tensor":
        y = np.tanh(self.data)
        return Tensor._from_op(y, (self,), lambda g: (g * (1.0 - y * y),), "tanh")

    def sigmoid(self) -> "Tensor":
        y = 0.5 * (np.tanh(0.5 * self.data) + 1.0)  # overflow-free logistic
        return Tensor._from_op(y, (self,), lambda g: (g * y * (1.0 - y),), "sigmoid")

    def exp(self) -> "Tensor":
        y = np.exp(self.data)
        return Tensor._from_op(y, (self,), lambda g: (g * y,), "exp")

    def square(self) -> "Tensor":
        x = self.data
        return Tensor._from_op(x * x, (self,), lambda g: (2.0 * x * g,), "square")

    def sqrt(self) -> "Tensor":
        if (self.data < 0).any():
            raise ValueError("sqrt of negative input")
        y = np.sqrt(self.data)
        return Tensor._from_op(y, (self,), lambda g: (g * 0.5 / y,), "sqrt")

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape
        y = self.data.sum(axis=axis, keepdims=keepdims)
        kept = self.data.sum(axis=axis, keepdims=True).shape

        def rule(g):
            return (np.broadcast_to(g.reshape(kept), shape).copy(),)

        return Tensor._from_op(y, (self,), rule, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        try:
            y = self.data.reshape(shape)
        except ValueError as exc:
            raise ShapeError(f"cannot reshape {old} into {tuple(shape)}") from exc
        return Tensor._from_op(y, (self,), lambda g: (g.reshape(old),), "reshape")

    def transpose(self, *axes) -> "Tensor":
        axes = axes or tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return Tensor._from_op(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),), "transpose")

    @property
    def T(self) -> "Tensor":
        return self.transpose()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.full(shape, g.sum())


def _binary(a, b, kind: str) -> Tensor:
    if not isinstance(b, Tensor):
        b = Tensor(b)
    if not isinstance(a, Tensor):
        a = Tensor(a)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not conform")
    x, y = a.data, b.data
    # size-1 operands collapse to a true scalar so the other shape wins
    if x.size == 1 and y.size != 1:
        x = x.reshape(())
    if y.size == 1 and x.size != 1:
        y = y.reshape(())
    sa, sb = a.shape, b.shape
    if kind == "add":
        out = x + y
        rule = lambda g: (_reduce_to(g, sa), _reduce_to(g, sb))  # noqa: E731
    elif kind == "sub":
        out = x - y
        rule = lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb))  # noqa: E731
    elif kind == "mul":
        out = x * y
        rule = lambda g: (_reduce_to(g * y, sa), _reduce_to(g * x, sb))  # noqa: E731
    else:  # pragma: no cover
        raise ValueError(kind)
    return Tensor._from_op(out, (a, b), rule, kind)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    x, y = a.data, b.data
    return Tensor._from_op(x @ y, (a, b), lambda g: (g @ y.T, x.T @ g), "matmul")


def _slice(a: Tensor, index) -> Tensor:
    y = a.data[index]
    shape = a.shape

    def rule(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return Tensor._from_op(np.array(y), (a,), rule, "slice")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``b`` broadcast over rows."""
    y = matmul(x, w)
    if b is None:
        return y
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match output width {w.shape[1]}")
    bias = b.data
    return Tensor._from_op(y.data + bias, (y, b), lambda g: (g, g.sum(axis=0)), "bias")


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))  # n,c,h,w,k,k
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1, zero-padded 'same' convolution (cross-correlation) over NCHW input."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ShapeError(f"conv2d: input {x.shape} and kernel {w.shape} do not conform")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias {b.shape} does not match kernel {w.shape}")
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = _im2col(xp, k, h, wd)
    wmat = w.data.reshape(o, c * k * k)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    y = out.reshape(n, h, wd, o).transpose(0, 3, 1, 2)

    def rule(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * h * wd, o)
        gw = (gm.T @ cols).reshape(w.shape)
        gcols = (gm @ wmat).reshape(n, h, wd, c, k, k)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + h, j:j + wd] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p:p + h, p:p + wd]
        if b is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(np.ascontiguousarray(y), parents, rule, "conv2d")


def film(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Per-sample, per-channel affine modulation ``x * (1 + scale) + shift``.

    ``x`` is NCHW; ``scale`` and ``shift`` are (N, C).
    """
    n, c = x.shape[:2]
    if x.ndim != 4 or scale.shape != (n, c) or shift.shape != (n, c):
        raise ShapeError(f"film: input {x.shape} with scale {scale.shape} / shift {shift.shape}")
    s = 1.0 + scale.data[:, :, None, None]
    xd = x.data
    y = xd * s + shift.data[:, :, None, None]
    return Tensor._from_op(
        y,
        (x, scale, shift),
        lambda g: (g * s, (g * xd).sum(axis=(2, 3)), g.sum(axis=(2, 3))),
        "film",
    )


def avg_pool2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2: spatial size of {x.shape} must be even")
    y = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def rule(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return Tensor._from_op(y, (x,), rule, "avg_pool2")


def upsample2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    y = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return Tensor._from_op(y, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),), "upsample2")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    ref = parts[0].shape
    for t in parts[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} do not conform on axis {axis}")
    sizes = np.cumsum([t.shape[axis] for t in parts])[:-1]
    y = np.concatenate([t.data for t in parts], axis=axis)
    return Tensor._from_op(y, parts, lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def l2_normalize(x: Tensor, axis: int = 1, eps: float = 1e-24) -> Tensor:
    """Divide by ``sqrt(sum(x**2, axis) + eps)``; smooth at the origin."""
    xd = x.data
    inv = 1.0 / np.sqrt((xd * xd).sum(axis=axis, keepdims=True) + eps)
    y = xd * inv

    def rule(g):
        return (inv * (g - y * (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(y, (x,), rule, "l2_normalize")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    mask = (x.data >= lo) & (x.data <= hi)
    return Tensor._from_op(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,), "clip")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)
    return Tensor._from_op(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


# -- backward --------------------------------------------------------------


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> dict[Tensor, Tensor]:
    """Gradients of a scalar ``root`` with respect to every traced leaf.

    Returns a mapping from each leaf tensor that requires a gradient to a
    tensor of the same shape. Fan-out contributions are summed.
    """
    if root.size != 1:
        raise TapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise TapeError("root was not produced under tracing from inputs that require grad")
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    leaves: dict[Tensor, Tensor] = {}
    for node in reversed(_topo(root)):
        g = grads.pop(id(node), None)
        if g is None:
            g = np.zeros(node.shape)
        if node._rule is None:
            leaves[node] = Tensor(g)
            continue
        for parent, pg in zip(node._parents, node._rule(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return leaves


def grad(f: Callable[..., Tensor], *inputs: np.ndarray | Tensor) -> list[np.ndarray]:
    """Evaluate ``f`` on fresh traced leaves and return the gradient arrays."""
    leaves = [Tensor(x.data if isinstance(x, Tensor) else x, requires_grad=True) for x in inputs]
    out = f(*leaves)
    g = backward(out)
    return [g[leaf].data if leaf in g else np.zeros(leaf.shape) for leaf in leaves]


def check_gradient(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, h: float = 1e-5) -> float:
    """Max over coordinates of ``|g_auto - g_fd| / max(1, |g_fd|)``.

    ``g_fd`` is the central finite difference with step ``h``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    probe = f(Tensor(x0))
    if probe.size != 1:
        raise ShapeError(f"check_gradient needs a scalar function, got shape {probe.shape}")
    (g_auto,) = grad(f, x0)
    g_fd = np.empty_like(x0)
    flat = x0.reshape(-1)
    out = g_fd.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(Tensor(x0)).item()
            flat[i] = orig - h
            fm = f(Tensor(x0)).item()
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * h)
    return float(np.max(np.abs(g_auto - g_fd) / np.maximum(1.0, np.abs(g_fd))))


# -- checkpoint format ---------------------------------------------------------

_MAGIC = b"GDTENSORS"


def save_tensors(path: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    """Write named float64 arrays: a JSON header line, then little-endian payload.

    Layout: ``GDTENSORS <header bytes>\\n<header json><payload>``.
    """
    fields = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(np.asarray(arrays[name], dtype="<f8"))
        blob = arr.tobytes(order="C")
        fields.append({"name": name, "shape": list(arr.shape), "dtype": "f64", "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"byteorder": "little", "fields": fields, "meta": dict(meta or {})}, sort_keys=True).encode()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_MAGIC + b" " + str(len(header)).encode() + b"\n")
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    first, _, rest = raw.partition(b"\n")
    magic, _, size = first.partition(b" ")
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a tensor checkpoint")
    n = int(size)
    header = json.loads(rest[:n])
    payload = rest[n:]
    out = {}
    for field in header["fields"]:
        if field["dtype"] != "f64":
            raise ValueError(f"{path}: unsupported dtype {field['dtype']!r}")
        chunk = payload[field["offset"]:field["offset"] + field["nbytes"]]
        out[field["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(field["shape"]).astype(np.float64)
    return out, header["meta"]


def params_as_leaves(params: Mapping[str, np.ndarray], requires_grad: bool = True) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}
