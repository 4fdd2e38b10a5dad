"""Dense float64 tensors with a recorded tape for reverse-mode differentiation.

Gradient tracking is on while a :class:`Tape` is active (``with Tape() as tape``)
and at least one input of an op has ``requires_grad``. Each primitive appends a
:class:`Node` holding a closure that maps the output gradient to input
gradients. ``tape.backward(loss)`` replays the nodes in reverse order.

Broadcasting is deliberately narrow: operands either share a shape, or one of
them is a scalar, or one is a 1-D vector matching axis 1 of the other
(channel/feature bias against ``[N, C, ...]``).
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LOG_EPS = 1e-12


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class ContractError(RuntimeError):
    """A caller violated a precondition (non-scalar loss, missing grad...)."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_node", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None
        self._tape: Optional[weakref.ref] = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        # internal constructor: no copy
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._node = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple:
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
        self.grad = None

    def backward(self) -> None:
        tape = self._tape() if self._tape is not None else None
        if tape is None:
            raise ContractError("tensor was not produced under a live Tape")
        tape.backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: weakref.ref
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


_ACTIVE: list = []


@dataclass
class Tape:
    """Ordered record of primitive applications for one forward pass."""

    nodes: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def record(self, op: str, inputs: tuple, output: Tensor, backward) -> None:
        # weak back-references keep the graph acyclic, so activations
        # are freed by refcount as soon as a step ends
        node = Node(op, inputs, weakref.ref(output), backward)
        output._node = node
        output._tape = weakref.ref(self)
        output.requires_grad = True
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every leaf with ``requires_grad`` reachable from ``loss``.

        Leaf gradients are added to any existing ``.grad`` buffer.
        """
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for node in reversed(self.nodes):
            out = node.output()
            g = None if out is None else grads.pop(id(out), None)
            if g is None:
                continue
            for inp, ig in zip(node.inputs, node.backward(g)):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                if inp._node is None:
                    leaves[key] = inp
        if loss._node is None and loss.requires_grad:
            leaves[id(loss)] = loss
        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracking(*inputs: Tensor) -> Optional[Tape]:
    if not _ACTIVE:
        return None
    if any(t.requires_grad for t in inputs):
        return _ACTIVE[-1]
    return None


def _emit(op: str, inputs: tuple, out: np.ndarray, backward) -> Tensor:
    t = Tensor._wrap(out)
    tape = _tracking(*inputs)
    if tape is not None:
        tape.record(op, inputs, t, backward)
    return t


# ---------------------------------------------------------------- broadcasting


def _broadcast_kind(a: np.ndarray, b: np.ndarray) -> str:
    if a.shape == b.shape:
        return "same"
    if b.size == 1 and b.ndim <= 1:
        return "b_scalar"
    if a.size == 1 and a.ndim <= 1:
        return "a_scalar"
    if b.ndim == 1 and a.ndim >= 2 and a.shape[1] == b.shape[0]:
        return "b_channel"
    if a.ndim == 1 and b.ndim >= 2 and b.shape[1] == a.shape[0]:
        return "a_channel"
    raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}")


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def _reduce_to(g: np.ndarray, kind: str, side: str, shape: tuple) -> np.ndarray:
    if kind == "same":
        return g
    if kind == f"{side}_scalar":
        return np.full(shape, g.sum())
    if kind == f"{side}_channel":
        axes = (0,) + tuple(range(2, g.ndim))
        return g.sum(axis=axes)
    return g


def _align(a: np.ndarray, b: np.ndarray, kind: str):
    if kind == "b_scalar":
        return a, b.reshape(())
    if kind == "a_scalar":
        return a.reshape(()), b
    if kind == "b_channel":
        return a, _channel_view(b, a.ndim)
    if kind == "a_channel":
        return _channel_view(a, b.ndim), b
    return a, b


# ------------------------------------------------------------------ elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a.data, b.data)
    x, y = _align(a.data, b.data, kind)

    def bw(g):
        return _reduce_to(g, kind, "a", a.shape), _reduce_to(g, kind, "b", b.shape)

    return _emit("add", (a, b), x + y, bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a.data, b.data)
    x, y = _align(a.data, b.data, kind)

    def bw(g):
        return _reduce_to(g, kind, "a", a.shape), -_reduce_to(g, kind, "b", b.shape)

    return _emit("sub", (a, b), x - y, bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a.data, b.data)
    x, y = _align(a.data, b.data, kind)

    def bw(g):
        return (
            _reduce_to(g * y, kind, "a", a.shape),
            _reduce_to(g * x, kind, "b", b.shape),
        )

    return _emit("mul", (a, b), x * y, bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a.data, b.data)
    x, y = _align(a.data, b.data, kind)
    out = x / y

    def bw(g):
        return (
            _reduce_to(g / y, kind, "a", a.shape),
            _reduce_to(-g * out / y, kind, "b", b.shape),
        )

    return _emit("div", (a, b), out, bw)


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    """Natural log with the input clamped to at least 1e-12."""
    x = a.data
    clamped = np.maximum(x, LOG_EPS)

    def bw(g):
        return (np.where(x >= LOG_EPS, g / clamped, 0.0),)

    return _emit("log", (a,), np.log(clamped), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _stable_sigmoid(a.data)
    return _emit("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (a,), out, bw)


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax over the last axis in log-sum-exp form."""
    m = a.data.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(a.data - m).sum(axis=-1, keepdims=True))
    out = a.data - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax", (a,), out, bw)


# ------------------------------------------------------------------- reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes)
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def bw(g):
        return (np.broadcast_to(g.reshape(kept), a.shape).copy(),)

    return _emit("sum", (a,), np.asarray(out), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(sum(a, axis=axes), 1.0 / count)


# --------------------------------------------------------------------- reshaping


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(f"cannot reshape {a.shape} into {tuple(shape)}") from err
    return _emit("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 1 (channels)."""
    tensors = tuple(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[:1] + t.shape[2:] != ref[:1] + ref[2:]:
            raise ShapeError(f"cannot concat shapes {ref} and {t.shape} over channels")
    bounds = np.cumsum([t.shape[1] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=1)

    def bw(g):
        return tuple(np.split(g, bounds, axis=1))

    return _emit("concat", tensors, out, bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    x, y = a.data, b.data

    def bw(g):
        return g @ y.T, x.T @ g

    return _emit("matmul", (a, b), x @ y, bw)


# ------------------------------------------------------------------ convolution


def conv_output_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def transpose_output_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n - 1) * stride - 2 * pad + k


def _windows(xp: np.ndarray, k: int, stride: int, out: tuple) -> np.ndarray:
    v = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    v = v[:, :, ::stride, ::stride, ::stride]
    return v[:, :, : out[0], : out[1], : out[2]]


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))


def _corr(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    k = w.shape[-1]
    out = tuple(conv_output_extent(n, k, stride, pad) for n in x.shape[2:])
    cols = _windows(_pad(x, pad), k, stride, out)
    y = np.tensordot(cols, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    return np.ascontiguousarray(y.transpose(0, 4, 1, 2, 3))


def _corr_adjoint(g: np.ndarray, w: np.ndarray, spatial: tuple, stride: int, pad: int) -> np.ndarray:
    """Adjoint of ``_corr`` w.r.t. its input, producing spatial extent ``spatial``."""
    k = w.shape[-1]
    n = g.shape[0]
    # [C_in, k, k, k, N, D', H', W'] so each tap slice is contiguous
    gcols = np.tensordot(w, g, axes=([0], [1]))
    full = tuple(s + 2 * pad for s in spatial)
    # grid large enough for every stamped window, trimmed afterwards
    ext = tuple(max(f, (o - 1) * stride + k) for f, o in zip(full, g.shape[2:]))
    xp = np.zeros((w.shape[1], n) + ext)
    od, oh, ow = g.shape[2:]
    for a in range(k):
        for b in range(k):
            for c in range(k):
                xp[
                    :,
                    :,
                    a : a + stride * od : stride,
                    b : b + stride * oh : stride,
                    c : c + stride * ow : stride,
                ] += gcols[:, a, b, c]
    xp = xp[:, :, pad : pad + spatial[0], pad : pad + spatial[1], pad : pad + spatial[2]]
    return np.ascontiguousarray(xp.transpose(1, 0, 2, 3, 4))


def _corr_kernel_grad(x: np.ndarray, g: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    cols = _windows(_pad(x, pad), k, stride, g.shape[2:])
    return np.tensordot(g, cols, axes=([0, 2, 3, 4], [0, 2, 3, 4]))


def _check_conv_args(x: Tensor, kernel: Tensor, bias: Optional[Tensor], in_axis: int, out_axis: int):
    if x.ndim != 5:
        raise ShapeError(f"expected a [N, C, D, H, W] input, got shape {x.shape}")
    if kernel.ndim != 5 or len(set(kernel.shape[2:])) != 1:
        raise ShapeError(f"expected a cubic [C_a, C_b, k, k, k] kernel, got shape {kernel.shape}")
    if x.shape[1] != kernel.shape[in_axis]:
        raise ShapeError(f"input channels {x.shape} do not match kernel {kernel.shape}")
    if bias is not None and bias.shape != (kernel.shape[out_axis],):
        raise ShapeError(f"bias shape {bias.shape} does not match kernel {kernel.shape}")


def conv3d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """3D cross-correlation; ``kernel`` is ``[C_out, C_in, k, k, k]``."""
    _check_conv_args(x, kernel, bias, 1, 0)
    k = kernel.shape[-1]
    out_sp = tuple(conv_output_extent(n, k, stride, pad) for n in x.shape[2:])
    if min(out_sp) < 1:
        raise ShapeError(f"conv3d output extent {out_sp} is not positive for input {x.shape}, k={k}")
    y = _corr(x.data, kernel.data, stride, pad)
    if bias is not None:
        y += _channel_view(bias.data, 5)

    def bw(g):
        gx = _corr_adjoint(g, kernel.data, x.shape[2:], stride, pad) if x.requires_grad else None
        gk = _corr_kernel_grad(x.data, g, k, stride, pad) if kernel.requires_grad else None
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return gx, gk, gb

    inputs = (x, kernel) + ((bias,) if bias is not None else ())
    return _emit("conv3d", inputs, y, bw)


def conv3d_transpose(
    x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0
) -> Tensor:
    """Adjoint of :func:`conv3d` with the same ``[C_a, C_b, k, k, k]`` kernel.

    Maps ``C_a`` channels to ``C_b`` channels; ``bias`` has length ``C_b``.
    """
    _check_conv_args(x, kernel, bias, 0, 1)
    k = kernel.shape[-1]
    out_sp = tuple(transpose_output_extent(n, k, stride, pad) for n in x.shape[2:])
    if min(out_sp) < 1:
        raise ShapeError(f"conv3d_transpose output extent {out_sp} is not positive for input {x.shape}")
    y = _corr_adjoint(x.data, kernel.data, out_sp, stride, pad)
    if bias is not None:
        y += _channel_view(bias.data, 5)

    def bw(g):
        gx = _corr(g, kernel.data, stride, pad) if x.requires_grad else None
        gk = _corr_kernel_grad(g, x.data, k, stride, pad) if kernel.requires_grad else None
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return gx, gk, gb

    inputs = (x, kernel) + ((bias,) if bias is not None else ())
    return _emit("conv3d_transpose", inputs, y, bw)


# ---------------------------------------------------------- finite differences


def finite_diff_grad(f: Callable[[Tensor], object], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time."""
    base = np.array(x.data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar(f(Tensor(base)))
        flat[i] = orig - h
        fm = _scalar(f(Tensor(base)))
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return grad


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        return v.item()
    return float(v)
