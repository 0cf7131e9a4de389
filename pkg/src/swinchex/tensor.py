"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op builds its backward closure only when at least one input requires a
gradient, so inference under :func:`no_grad` (or on constants) costs a plain
numpy call.
"""
from __future__ import annotations

import contextlib
import math
import struct
from collections.abc import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64

_grad_enabled = True
_mac_counters: list[list[int]] = []
_kink_logs: list[list[np.ndarray]] = []


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def count_macs() -> Iterator[list[int]]:
    """Count multiply-accumulates performed by :func:`matmul` inside the block.

    Yields a one-element list whose entry holds the running total.
    """
    counter = [0]
    _mac_counters.append(counter)
    try:
        yield counter
    finally:
        _mac_counters.remove(counter)


@contextlib.contextmanager
def record_kinks() -> Iterator[list[np.ndarray]]:
    """Collect the on/off pattern of every piecewise op (relu, clip) run inside the block.

    Two evaluations whose patterns differ lie on different linear pieces, so a
    finite difference between them straddles a kink.
    """
    log: list[np.ndarray] = []
    _kink_logs.append(log)
    try:
        yield log
    finally:
        _kink_logs.remove(log)


def _log_kink(mask: np.ndarray) -> None:
    for log in _kink_logs:
        log.append(mask)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a, c = as_tensor(a), float(b)
        return _make(a.data + c, (a,), lambda g: (g,))
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _make(a.data + b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a, c = as_tensor(a), float(b)
        return _make(a.data * c, (a,), lambda g: (g * c,))
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _make(a.data * b.data, (a, b), bw)


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    if _kink_logs:
        _log_kink(mask)
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,))  # NaN propagates


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(x * cdf, (a,), bw)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    if _kink_logs:
        _log_kink(np.sign(np.clip(a.data, lo, hi) - a.data))
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out, dtype=DTYPE), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    known = [s for s in shape if s != -1]
    if -1 not in shape and int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} ({a.size} elements) to {shape}")
    if -1 in shape and (not known or a.size % int(np.prod(known)) != 0):
        raise ShapeError(f"cannot reshape {a.shape} ({a.size} elements) to {shape}")
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def roll(a: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    shifts, axes = tuple(shifts), tuple(axes)
    back = tuple(-s for s in shifts)
    return _make(np.roll(a.data, shifts, axes), (a,), lambda g: (np.roll(g, back, axes),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def getitem(a: Tensor, index) -> Tensor:
    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(np.array(a.data[index], dtype=DTYPE), (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra and normalization


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two dims, batched over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # batched @ matrix: one flat GEMM each way
        k = a.shape[-1]
        out = (a.data.reshape(-1, k) @ b.data).reshape(*a.shape[:-1], b.shape[1])
    else:
        out = np.matmul(a.data, b.data)
    if _mac_counters:
        macs = out.size * a.shape[-1]
        for c in _mac_counters:
            c[0] += macs

    if b.ndim == 2 and a.ndim > 2:
        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a.data.reshape(-1, a.shape[-1]).T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), bw)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _make(out, (a, b), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis (biased variance) then apply ``gamma``/``beta``."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm expects gamma/beta of shape ({c},), got {gamma.shape}, {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bw)


def avg_pool2d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping average pooling over the two axes preceding channels.

    ``x`` has shape ``(..., h, w, C)``; returns ``(..., h/window, w/window, C)``.
    """
    *lead, h, w, c = x.shape
    if h % window or w % window:
        raise ShapeError(f"avg_pool2d window {window} does not tile {h}x{w}")
    k = len(lead)
    t = reshape(x, (*lead, h // window, window, w // window, window, c))
    return mean(t, axis=(k + 1, k + 3))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------------------
# reverse pass


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
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


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable ``t`` requiring grad."""
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor | np.ndarray,
    eps: float = 1e-5,
    floor: float = 1e-3,
    coords: Sequence[tuple[int, ...]] | None = None,
) -> float:
    """Max relative error between backward() and central differences of ``f`` at ``x``.

    The relative error of each coordinate is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps round-off on vanishing gradients from reading as failure.
    ``coords`` restricts the comparison to a subset of coordinates.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    leaf = Tensor(base.copy(), requires_grad=True)
    backward(f(leaf))
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)
    if coords is None:
        coords = list(np.ndindex(base.shape))
    worst = 0.0
    with no_grad():
        for idx in coords:
            plus, minus = base.copy(), base.copy()
            plus[idx] += eps
            minus[idx] -= eps
            num = (f(Tensor(plus)).item() - f(Tensor(minus)).item()) / (2.0 * eps)
            a = float(analytic[idx])
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return worst


# ---------------------------------------------------------------------------
# parameter collections


class ParamSet:
    """Named learnable tensors, iterated in sorted path order."""

    def __init__(self, params: dict[str, Tensor] | None = None):
        self._params: dict[str, Tensor] = {}
        for path, t in (params or {}).items():
            self[path] = t

    def __setitem__(self, path: str, value: Tensor) -> None:
        if path in self._params:
            raise KeyError(f"duplicate parameter path {path!r}")
        value.requires_grad = True
        value.name = path
        self._params[path] = value

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._params))

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for path in self:
            yield path, self._params[path]

    def prefixed(self, prefix: str) -> dict[str, Tensor]:
        return {p[len(prefix):]: t for p, t in self.items() if p.startswith(prefix)}

    def num_values(self, prefix: str = "") -> int:
        return sum(t.size for p, t in self.items() if p.startswith(prefix))

    def zero_grad(self) -> None:
        for _, t in self.items():
            t.zero_grad()

    def copy(self) -> ParamSet:
        return ParamSet({p: Tensor(t.data.copy()) for p, t in self.items()})

    def state(self) -> dict[str, np.ndarray]:
        return {p: t.data for p, t in self.items()}

    def to_bytes(self) -> bytes:
        parts = [MAGIC]
        for path, t in self.items():
            raw = path.encode("utf-8")
            parts.append(struct.pack("<Q", len(raw)))
            parts.append(raw)
            parts.append(struct.pack("<Q", t.ndim))
            parts.append(struct.pack(f"<{t.ndim}Q", *t.shape))
            parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> ParamSet:
        if not blob.startswith(MAGIC):
            raise ValueError("not a SWCX1 checkpoint (bad magic)")
        pos = len(MAGIC)
        out = cls()
        try:
            while pos < len(blob):
                (n,) = struct.unpack_from("<Q", blob, pos)
                pos += 8
                path = blob[pos:pos + n].decode("utf-8")
                pos += n
                (rank,) = struct.unpack_from("<Q", blob, pos)
                pos += 8
                shape = struct.unpack_from(f"<{rank}Q", blob, pos)
                pos += 8 * rank
                count = int(np.prod(shape, dtype=np.int64))
                if pos + 8 * count > len(blob):
                    raise ValueError(f"truncated values for {path!r}")
                values = np.frombuffer(blob, dtype="<f8", count=count, offset=pos)
                pos += 8 * count
                out[path] = Tensor(values.reshape(shape).astype(DTYPE))
        except struct.error as exc:
            raise ValueError(f"truncated checkpoint: {exc}") from exc
        return out

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> ParamSet:
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


MAGIC = b"SWCX1"
