"""Dense tensors with reverse-mode automatic differentiation.

Every tensor wraps a row-major numpy array. Operations executed while gradient
tracking is enabled attach a :class:`Node` to their output recording the input
tensors and a backward rule. Calling :meth:`Tensor.backward` on a scalar
orders the recorded nodes topologically (the tape) and replays their backward
rules in reverse, each exactly once.

Shapes must match exactly for elementwise binary ops. The only implicit
broadcast is tensor-with-scalar; row-vector bias addition is the explicit
:func:`add_bias`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Node",
    "ShapeError",
    "NumericalError",
    "tensor",
    "zeros",
    "ones",
    "no_grad",
    "is_grad_enabled",
    "precision",
    "get_default_dtype",
    "set_default_dtype",
    "build_tape",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericalError(FloatingPointError):
    """Raised when an op produces NaN or Inf from finite inputs."""


class _State(threading.local):
    def __init__(self) -> None:
        self.grad_enabled = True
        self.dtype: type = np.float32


_state = _State()


def get_default_dtype():
    return _state.dtype


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _state.dtype = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default dtype (float64 for gradient checks)."""
    prev = _state.dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def is_grad_enabled() -> bool:
    return _state.grad_enabled


class Node:
    """One executed primitive: its inputs and the rule mapping dOut to dInputs."""

    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op: str, parents: tuple[Tensor, ...], backward_fn: Callable):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _state.dtype)
        # ascontiguousarray promotes 0-d arrays to 1-d, so leave scalars alone
        self.data: np.ndarray = np.ascontiguousarray(arr) if arr.ndim else arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None
        self.name = name

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # ---------------------------------------------------------------- autodiff
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every tensor on the tape.

        Leaf gradients accumulate with ``+=``; zero them between steps.
        """
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"backward() without an explicit grad needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)

        tape = build_tape(self)
        pending: dict[int, np.ndarray] = {id(self): grad}
        for t in reversed(tape):
            g = pending.pop(id(t), None)
            if g is None:
                continue
            t.grad = g
            parent_grads = t.node.backward_fn(g)
            for p, pg in zip(t.node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.shape:
                    raise ShapeError(f"{t.node.op}: backward produced {pg.shape} for input of shape {p.shape}")
                if p.node is None:
                    p.grad = pg.astype(p.dtype, copy=True) if p.grad is None else p.grad + pg
                else:
                    key = id(p)
                    pending[key] = pg if key not in pending else pending[key] + pg

    # -------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _raise_item(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_state.dtype), requires_grad=requires_grad, name=name)


def ones(shape, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.ones(shape, dtype=_state.dtype), requires_grad=requires_grad, name=name)


def build_tape(root: Tensor) -> list[Tensor]:
    """Topologically ordered op outputs reachable from ``root`` (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen or t.node is None:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t.node.parents:
            if p.node is not None and id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _result(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{op}: produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    track = _state.grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out.node = Node(op, tuple(parents), backward_fn) if track else None
    return out


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no implicit broadcasting)")


def _is_scalar(x) -> bool:
    return not isinstance(x, Tensor) or x.ndim == 0


# ----------------------------------------------------------------- arithmetic
def add(a: Tensor, b) -> Tensor:
    if _is_scalar(b) and not isinstance(b, Tensor):
        return _result("add", a.data + b, (a,), lambda g: (g,))
    b = _as_tensor(b, a)
    if b.ndim == 0 and a.ndim > 0:
        return _result("add", a.data + b.data, (a, b), lambda g: (g, np.asarray(g.sum(), dtype=b.dtype)))
    _check_same("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -b)
    return add(a, neg(b))


def neg(a: Tensor) -> Tensor:
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = b
        return _result("mul", a.data * s, (a,), lambda g: (g * s,))
    if b.ndim == 0 and a.ndim > 0:
        return _result(
            "mul",
            a.data * b.data,
            (a, b),
            lambda g: (g * b.data, np.asarray((g * a.data).sum(), dtype=b.dtype)),
        )
    _check_same("mul", a, b)
    return _result("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same("div", a, b)
        out = a.data / b.data
        return _result("div", out, (a, b), lambda g: (g / b.data, -g * out / b.data))
    return mul(a, 1.0 / b)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` with ``b`` a vector matching the last axis of ``x``."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _result("add_bias", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch axes must be identical when present."""
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise ShapeError(f"matmul: expected matrices of equal rank, got {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ {a.shape[:-2]} vs {b.shape[:-2]}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions differ, {a.shape} @ {b.shape} ({a.shape[-1]} != {b.shape[-2]})"
        )
    A, B = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(B, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(A, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _result("matmul", A @ B, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return add_bias(y, b) if b is not None else y


# ----------------------------------------------------------------- pointwise
def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result("relu", x.data * mask, (x,), lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return _result("gelu", out, (x,), backward)


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    return _result("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _result("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _result("log", out, (x,), lambda g: (g / x.data,))


# ---------------------------------------------------------------- reductions
def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result("sum", out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis, keepdims), 1.0 / count)


# ------------------------------------------------------------------- layout
def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc
    return _result("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _result("transpose", out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def backward(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax))
            for i in range(len(tensors))
        )

    return _result("concat", out, tensors, backward)


def slice_(x: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing; always returns a copy."""
    out = np.array(x.data[index], copy=True)

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _result("slice", out, (x,), backward)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather entries along ``axis`` by an integer index array (repeats allowed)."""
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(x.data, idx, axis=axis)

    def backward(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _result("take", out, (x,), backward)


# ---------------------------------------------------------- normalisations
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result("softmax", s, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _result("log_softmax", out, (x,), backward)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gamma * xhat + beta``."""
    if eps <= 0:
        raise ValueError("layernorm: eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: gamma/beta must have shape ({d},), got {gamma.shape}/{beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx = gxhat = None
        gxhat = g * gamma.data
        if x.requires_grad:
            gx = inv * (
                gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result("layernorm", out, (x, gamma, beta), backward)


# ------------------------------------------------------------------- losses
def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy on logits; targets are constants in [0, 1]."""
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: targets {t.shape} vs logits {logits.shape}")
    z = logits.data
    out = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    s = _stable_sigmoid(z)
    return _result("bce_with_logits", out, (logits,), lambda g: (g * (s - t),))


def smooth_l1(x: Tensor, target, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style loss: 0.5 d^2/beta inside |d| < beta, |d| - beta/2 outside."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=x.dtype)
    if t.shape != x.shape:
        raise ShapeError(f"smooth_l1: target {t.shape} vs input {x.shape}")
    d = x.data - t
    ad = np.abs(d)
    inside = ad < beta
    out = np.where(inside, 0.5 * d * d / beta, ad - 0.5 * beta)
    return _result("smooth_l1", out, (x,), lambda g: (g * np.where(inside, d / beta, np.sign(d)),))


# -------------------------------------------------------------- convolution
def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(0, 1))  # h, w, C, k, k
    return np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(h * w, -1)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1, zero "same"-padded convolution on a channels-last map.

    ``x`` is H x W x Cin, ``weight`` is k x k x Cin x Cout with k odd.
    """
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected HxWxC input and kxkxCinxCout kernel, got {x.shape}, {weight.shape}")
    k, k2, cin, cout = weight.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
    if x.shape[2] != cin:
        raise ShapeError(f"conv2d: input has {x.shape[2]} channels, kernel expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    h, w, _ = x.shape
    p = k // 2
    xp = np.pad(x.data, ((p, p), (p, p), (0, 0)))
    cols = _im2col(xp, k, h, w)
    wmat = weight.data.reshape(k * k * cin, cout)
    out = (cols @ wmat).reshape(h, w, cout)
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(h * w, cout)
        gw = (cols.T @ g2).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(h, w, k, k, cin)
            gxp = np.zeros_like(xp)
            for dy in range(k):
                for dx in range(k):
                    gxp[dy : dy + h, dx : dx + w] += gcols[:, :, dy, dx]
            gx = gxp[p : p + h, p : p + w]
        grads = (gx, gw)
        if bias is not None:
            grads = grads + (g2.sum(axis=0),)
        return grads

    return _result("conv2d", out, parents, backward)
