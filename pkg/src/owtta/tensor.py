"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded on the innermost active :class:`Tape` whenever at
least one input requires a gradient. Without an active tape every kernel is a
plain numpy evaluation, which is what the finite-difference oracles use.

Each kernel is a pair ``(forward, vjp)`` held in ``_KERNELS``. ``forward``
maps input arrays (plus static attributes) to an output array; ``vjp`` maps
the output cotangent back to one cotangent per input.
"""

from __future__ import annotations

import itertools
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DomainError",
    "ShapeError",
    "Tape",
    "Tensor",
    "as_tensor",
    "parameter",
    "constant",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "shift",
    "exp",
    "log",
    "softmax",
    "layer_norm",
    "gelu",
    "concat",
    "mean",
    "sum",
    "l2_norm",
    "cosine_similarity",
    "normalize",
    "entropy",
    "reshape",
    "transpose",
    "take",
    "backward",
    "active_tape",
]

DTYPE = np.float64
LN_EPS = 1e-5
ZERO_NORM = 1e-12


class ShapeError(ValueError):
    """Inputs to a kernel have incompatible shapes."""


class DomainError(ValueError):
    """A kernel was evaluated outside its mathematical domain."""


_ids = itertools.count()
_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
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

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; scalars route to the scale/shift kernels
    def __add__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, float(other))
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, -float(other))
        return sub(self, other)

    def __rsub__(self, other):
        return shift(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return NotImplemented

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


class _Record:
    __slots__ = ("op", "inputs", "output", "attrs", "value")

    def __init__(self, op, inputs, output, attrs, value):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.attrs = attrs
        self.value = value


class Tape:
    """Ordered record of primitive operations; record order is topological.

    Use as a context manager. Tapes nest per thread and are never shared
    between threads.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self, "tape stack corrupted"
        stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def tensors(self) -> list[Tensor]:
        """Every tensor touched by the tape, inputs first, without repeats."""
        seen: dict[int, Tensor] = {}
        for rec in self.records:
            for t in rec.inputs:
                seen.setdefault(t.node_id, t)
            seen.setdefault(rec.output.node_id, rec.output)
        return list(seen.values())

    def replay(self) -> list[np.ndarray]:
        """Re-run every record from leaf values and return the fresh outputs."""
        values: dict[int, np.ndarray] = {}
        outs = []
        for rec in self.records:
            args = [values.get(t.node_id, t.data) for t in rec.inputs]
            out = _KERNELS[rec.op][0](*args, **rec.attrs)
            values[rec.output.node_id] = out
            outs.append(out)
        return outs

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {rec.output.node_id for rec in self.records}
        cot: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = cot.get(rec.output.node_id)
            if g is None:
                continue
            args = [t.data for t in rec.inputs]
            grads = _KERNELS[rec.op][1](g, rec.value, *args, **rec.attrs)
            for t, gt in zip(rec.inputs, grads):
                if gt is None or not t.requires_grad:
                    continue
                prev = cot.get(t.node_id)
                cot[t.node_id] = gt if prev is None else prev + gt
        for t in self.tensors():
            g = cot.get(t.node_id)
            if t.node_id in produced:
                t.grad = g if g is not None else np.zeros_like(t.data)
            elif t.requires_grad:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                if g is not None:
                    t.grad = t.grad + g
        if loss.node_id not in produced and loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` of every trainable leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; call ``zero_grad`` in between.
    """
    tape = tape or active_tape()
    if tape is None:
        raise RuntimeError("backward requires the tape the loss was recorded on")
    tape.backward(loss)


_KERNELS: dict[str, tuple[Callable, Callable]] = {}


def _kernel(name: str):
    def register(pair):
        _KERNELS[name] = pair
        return pair

    return register


def _apply(op: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    fwd = _KERNELS[op][0]
    value = np.asarray(fwd(*[t.data for t in inputs], **attrs))
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = value
    out.grad = None
    out.requires_grad = needs
    out.node_id = next(_ids)
    out.name = None
    if needs:
        tape.records.append(_Record(op, tuple(inputs), out, attrs, value))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- matrix multiply ---------------------------------------------------------


def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        return np.matmul(a, b)
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} differ") from None


def _matmul_vjp(g, out, a, b):
    if b.ndim == 2:
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    else:
        gb = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape)
    ga = _unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape)
    return ga, gb


_kernel("matmul")((_matmul_fwd, _matmul_vjp))


def matmul(a, b) -> Tensor:
    return _apply("matmul", (as_tensor(a), as_tensor(b)))


# -- elementwise ---------------------------------------------------------------


def _add_fwd(a, b):
    _check_broadcast(a, b, "add")
    return a + b


def _add_vjp(g, out, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _sub_fwd(a, b):
    _check_broadcast(a, b, "sub")
    return a - b


def _sub_vjp(g, out, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _mul_fwd(a, b):
    _check_broadcast(a, b, "mul")
    return a * b


def _mul_vjp(g, out, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


_kernel("add")((_add_fwd, _add_vjp))
_kernel("sub")((_sub_fwd, _sub_vjp))
_kernel("mul")((_mul_fwd, _mul_vjp))
_kernel("scale")((lambda a, c: a * c, lambda g, out, a, c: (g * c,)))
_kernel("shift")((lambda a, c: a + c, lambda g, out, a, c: (g,)))


def add(a, b) -> Tensor:
    return _apply("add", (as_tensor(a), as_tensor(b)))


def sub(a, b) -> Tensor:
    return _apply("sub", (as_tensor(a), as_tensor(b)))


def mul(a, b) -> Tensor:
    return _apply("mul", (as_tensor(a), as_tensor(b)))


def scale(a, c: float) -> Tensor:
    return _apply("scale", (as_tensor(a),), c=float(c))


def shift(a, c: float) -> Tensor:
    return _apply("shift", (as_tensor(a),), c=float(c))


_kernel("exp")((lambda a: np.exp(a), lambda g, out, a: (g * out,)))


def _log_fwd(a):
    if np.any(a <= 0):
        raise DomainError("log of a non-positive value")
    return np.log(a)


_kernel("log")((_log_fwd, lambda g, out, a: (g / a,)))


def exp(a) -> Tensor:
    return _apply("exp", (as_tensor(a),))


def log(a) -> Tensor:
    return _apply("log", (as_tensor(a),))


# -- softmax / normalisation / activation ------------------------------------


def _softmax_fwd(a, axis):
    # max-subtraction is exact in real arithmetic
    z = np.exp(a - a.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def _softmax_vjp(g, out, a, axis):
    return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)


_kernel("softmax")((_softmax_fwd, _softmax_vjp))


def softmax(a, axis: int = -1) -> Tensor:
    return _apply("softmax", (as_tensor(a),), axis=axis)


def _ln_fwd(x, gamma, beta, eps):
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: affine {gamma.shape}/{beta.shape} vs input {x.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    return xc * inv * gamma + beta


def _ln_vjp(g, out, x, gamma, beta, eps):
    n = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    lead = tuple(range(x.ndim - 1))
    ggamma = (g * xhat).sum(axis=lead)
    gbeta = g.sum(axis=lead)
    gx_hat = g * gamma
    gx = inv / n * (
        n * gx_hat
        - gx_hat.sum(axis=-1, keepdims=True)
        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
    )
    return gx, ggamma, gbeta


_kernel("layer_norm")((_ln_fwd, _ln_vjp))


def layer_norm(x, gamma, beta, eps: float = LN_EPS) -> Tensor:
    """Per-token normalisation over the last axis with affine ``gamma``/``beta``."""
    return _apply("layer_norm", (as_tensor(x), as_tensor(gamma), as_tensor(beta)), eps=eps)


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu_fwd(a):
    a2 = a * a
    return 0.5 * a * (1.0 + np.tanh(_GELU_C * a * (1.0 + 0.044715 * a2)))


def _gelu_vjp(g, out, a):
    a2 = a * a
    t = np.tanh(_GELU_C * a * (1.0 + 0.044715 * a2))
    du = _GELU_C * (1.0 + 3 * 0.044715 * a2)
    return (g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * du),)


_kernel("gelu")((_gelu_fwd, _gelu_vjp))


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    return _apply("gelu", (as_tensor(a),))


# -- structure -------------------------------------------------------------------


def _concat_fwd(*arrays, axis):
    try:
        return np.concatenate(arrays, axis=axis)
    except ValueError as err:
        raise ShapeError(f"concat: {err}") from None


def _concat_vjp(g, out, *arrays, axis):
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


_kernel("concat")((_concat_fwd, _concat_vjp))


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    return _apply("concat", tuple(as_tensor(t) for t in tensors), axis=axis)


def _reduce_vjp_shape(g, a, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, a.shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, a.shape)


def _mean_vjp(g, out, a, axis, keepdims):
    n = a.size if axis is None else a.shape[axis]
    return (np.array(_reduce_vjp_shape(g, a, axis, keepdims) / n),)


def _sum_vjp(g, out, a, axis, keepdims):
    return (np.array(_reduce_vjp_shape(g, a, axis, keepdims)),)


_kernel("mean")((lambda a, axis, keepdims: np.asarray(a.mean(axis=axis, keepdims=keepdims)), _mean_vjp))
_kernel("sum")((lambda a, axis, keepdims: np.asarray(a.sum(axis=axis, keepdims=keepdims)), _sum_vjp))


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    return _apply("mean", (as_tensor(a),), axis=axis, keepdims=keepdims)


def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return _apply("sum", (as_tensor(a),), axis=axis, keepdims=keepdims)


_kernel("reshape")((lambda a, shape: a.reshape(shape), lambda g, out, a, shape: (g.reshape(a.shape),)))
_kernel("transpose")(
    (lambda a, axes: a.transpose(axes), lambda g, out, a, axes: (g.transpose(np.argsort(axes)),))
)


def _take_vjp(g, out, a, index):
    ga = np.zeros_like(a)
    if _fancy(index):
        np.add.at(ga, index, g)
    else:
        ga[index] = g
    return (ga,)


def _fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


_kernel("take")((lambda a, index: np.array(a[index]), _take_vjp))


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    if int(np.prod(shape)) != a.size and -1 not in shape:
        raise ShapeError(f"reshape: {a.shape} -> {shape}")
    return _apply("reshape", (a,), shape=tuple(shape))


def transpose(a, axes: tuple[int, ...]) -> Tensor:
    return _apply("transpose", (as_tensor(a),), axes=tuple(axes))


def take(a, index) -> Tensor:
    """Basic or integer-array indexing; the adjoint scatters back."""
    return _apply("take", (as_tensor(a),), index=index)


# -- norms and similarities ---------------------------------------------------


def _l2_fwd(a, axis):
    return np.sqrt((a * a).sum(axis=axis))


def _l2_vjp(g, out, a, axis):
    o = np.expand_dims(out, axis)
    safe = np.where(o > ZERO_NORM, o, 1.0)
    return (np.where(o > ZERO_NORM, a / safe, 0.0) * np.expand_dims(g, axis),)


_kernel("l2_norm")((_l2_fwd, _l2_vjp))


def l2_norm(a, axis: int = -1) -> Tensor:
    return _apply("l2_norm", (as_tensor(a),), axis=axis)


def _normalize_fwd(a, axis):
    n = np.sqrt((a * a).sum(axis=axis, keepdims=True))
    return np.where(n > ZERO_NORM, a / np.where(n > ZERO_NORM, n, 1.0), 0.0)


def _normalize_vjp(g, out, a, axis):
    n = np.sqrt((a * a).sum(axis=axis, keepdims=True))
    ok = n > ZERO_NORM
    safe = np.where(ok, n, 1.0)
    proj = (g * out).sum(axis=axis, keepdims=True)
    return (np.where(ok, (g - out * proj) / safe, 0.0),)


_kernel("normalize")((_normalize_fwd, _normalize_vjp))


def normalize(a, axis: int = -1) -> Tensor:
    """``a / ||a||`` along ``axis``; zero-norm slices map to zero."""
    return _apply("normalize", (as_tensor(a),), axis=axis)


def _cos_fwd(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: {a.shape} vs {b.shape}")
    na = np.sqrt((a * a).sum(axis=-1))
    nb = np.sqrt((b * b).sum(axis=-1))
    ok = (na > ZERO_NORM) & (nb > ZERO_NORM)
    return np.where(ok, (a * b).sum(axis=-1) / np.where(ok, na * nb, 1.0), 0.0)


def _cos_vjp(g, out, a, b):
    na = np.sqrt((a * a).sum(axis=-1, keepdims=True))
    nb = np.sqrt((b * b).sum(axis=-1, keepdims=True))
    ok = (na > ZERO_NORM) & (nb > ZERO_NORM)
    na_s = np.where(ok, na, 1.0)
    nb_s = np.where(ok, nb, 1.0)
    c = out[..., None]
    gg = g[..., None]
    ga = np.where(ok, gg * (b / (na_s * nb_s) - c * a / na_s**2), 0.0)
    gb = np.where(ok, gg * (a / (na_s * nb_s) - c * b / nb_s**2), 0.0)
    return ga, gb


_kernel("cosine_similarity")((_cos_fwd, _cos_vjp))


def cosine_similarity(a, b) -> Tensor:
    """Cosine of the angle between ``a`` and ``b`` along the last axis (0 if either is zero)."""
    return _apply("cosine_similarity", (as_tensor(a), as_tensor(b)))


def _entropy_fwd(p, axis):
    return -np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0).sum(axis=axis)


def _entropy_vjp(g, out, p, axis):
    # 0 log 0 = 0; the one-sided derivative at 0 is taken as 0
    d = np.where(p > 0, -(np.log(np.where(p > 0, p, 1.0)) + 1.0), 0.0)
    return (d * np.expand_dims(g, axis),)


_kernel("entropy")((_entropy_fwd, _entropy_vjp))


def entropy(p, axis: int = -1) -> Tensor:
    """Shannon entropy ``-sum p log p`` along ``axis`` (natural log)."""
    return _apply("entropy", (as_tensor(p),), axis=axis)
