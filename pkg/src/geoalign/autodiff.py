"""Minimal dense-tensor core with reverse-mode differentiation.

Everything is float64. A :class:`Tensor` wraps a numpy array; a :class:`Tape`
records every differentiable operation in execution order and replays the
record backward to populate gradients. Coverage is deliberately small: the
set of operations the rest of this package actually differentiates through
(convolution with replicate padding, adaptive average pooling, softmax,
sigmoid, pointwise arithmetic, masked reductions, the stable softplus and a
handful of shape utilities). Anything else stays plain numpy.

Conventions that the rest of the package relies on:

* convolution is cross-correlation (no kernel flip),
* spatial borders are always handled by replicate (clamp-to-edge) padding,
* adaptive pooling uses floor boundaries ``floor(i*H/out) .. floor((i+1)*H/out)``,
* softmax always subtracts the running maximum before exponentiation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


class Tensor:
    """Dense float64 array, optionally tracked by a :class:`Tape`."""

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False, tape: "Tape | None" = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite")
        if requires_grad and tape is None:
            raise ValueError("a tensor that requires grad must belong to a tape")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a one-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"

    # Small operator sugar; everything routes through the module-level ops so
    # the tape sees a single code path.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))


@dataclass
class _Node:
    """One executed differentiable op: output, inputs, and the pullback."""

    output: Tensor
    inputs: tuple[Tensor, ...]
    pullback: Callable[[Array], Sequence[Array | None]]


class Tape:
    """Ordered record of differentiable operations.

    ``backward`` walks the record in exact reverse execution order and
    accumulates gradients into every ``requires_grad`` tensor reachable from
    the loss. Calling it again overwrites previously populated gradients.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def leaf(self, data) -> Tensor:
        """Create a trainable leaf tensor attached to this tape."""
        return Tensor(data, requires_grad=True, tape=self)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
        tensors: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self._nodes):
            g_out = grads.get(id(node.output))
            if g_out is None:
                continue
            for tensor, g in zip(node.inputs, node.pullback(g_out)):
                if g is None:
                    continue
                key = id(tensor)
                tensors[key] = tensor
                held = grads.get(key)
                grads[key] = g if held is None else held + g
        for key, tensor in tensors.items():
            if tensor.requires_grad:
                tensor.grad = grads[key]


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Run the reverse pass for ``loss`` on ``tape`` (or the loss's own tape)."""
    tape = tape if tape is not None else loss.tape
    if tape is None:
        raise ValueError("loss is not attached to any tape")
    tape.backward(loss)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _emit(inputs: tuple[Tensor, ...], out_data: Array,
          pullback: Callable[[Array], Sequence[Array | None]]) -> Tensor:
    """Build the output tensor and record the node when gradients are live."""
    tape = next((t.tape for t in inputs if t.tape is not None), None)
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track, tape=tape if track else None)
    if track:
        tape._nodes.append(_Node(out, inputs, pullback))
    return out


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` down to ``shape`` (the adjoint of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# pointwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def pullback(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _emit((a, b), out, pullback)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def pullback(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _emit((a, b), out, pullback)


def relu(t: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly zero is taken as zero."""
    t = _as_tensor(t)
    mask = t.data > 0.0

    def pullback(g):
        return (g * mask,)

    return _emit((t,), np.where(mask, t.data, 0.0), pullback)


def absolute(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    sign = np.sign(t.data)

    def pullback(g):
        return (g * sign,)

    return _emit((t,), np.abs(t.data), pullback)


def sigmoid(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    # Stable in both tails: never exponentiates a positive number.
    z = np.exp(-np.abs(t.data))
    s = np.where(t.data >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))

    def pullback(g):
        return (g * s * (1.0 - s),)

    return _emit((t,), s, pullback)


def log1p_exp(t: Tensor) -> Tensor:
    """log(1 + exp(x)), computed as logaddexp(0, x) so large x cannot overflow."""
    t = _as_tensor(t)
    out = np.logaddexp(0.0, t.data)
    z = np.exp(-np.abs(t.data))
    grad_sig = np.where(t.data >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))

    def pullback(g):
        return (g * grad_sig,)

    return _emit((t,), out, pullback)


# ---------------------------------------------------------------------------
# reductions


def sum_all(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    shape = t.data.shape

    def pullback(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _emit((t,), np.asarray(t.data.sum()), pullback)


def mean_all(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    shape = t.data.shape
    n = t.data.size

    def pullback(g):
        return (np.broadcast_to(g / n, shape).copy(),)

    return _emit((t,), np.asarray(t.data.mean()), pullback)


def masked_mean(t: Tensor, mask) -> Tensor:
    """Mean of the entries selected by a boolean mask (broadcast to t's shape)."""
    t = _as_tensor(t)
    sel = np.broadcast_to(np.asarray(mask, dtype=bool), t.data.shape)
    count = int(sel.sum())
    if count == 0:
        raise ValueError("masked_mean over an empty selection")
    out = np.asarray(t.data[sel].sum() / count)

    def pullback(g):
        return (np.where(sel, g / count, 0.0),)

    return _emit((t,), out, pullback)


def mean_over_axis(t: Tensor, axis: int, keepdims: bool = True) -> Tensor:
    t = _as_tensor(t)
    axis = axis if axis >= 0 else axis + t.data.ndim
    if not 0 <= axis < t.data.ndim:
        raise ValueError(f"axis {axis} out of range for shape {t.shape}")
    n = t.data.shape[axis]
    shape = t.data.shape
    out = t.data.mean(axis=axis, keepdims=keepdims)

    def pullback(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _emit((t,), out, pullback)


# ---------------------------------------------------------------------------
# shape utilities


def reshape(t: Tensor, shape: tuple[int, ...]) -> Tensor:
    t = _as_tensor(t)
    old = t.data.shape

    def pullback(g):
        return (g.reshape(old),)

    return _emit((t,), t.data.reshape(shape), pullback)


def select_index(t: Tensor, axis: int, index: int) -> Tensor:
    """Take one slice along ``axis`` (the axis is dropped)."""
    t = _as_tensor(t)
    axis = axis if axis >= 0 else axis + t.data.ndim
    shape = t.data.shape
    if not 0 <= axis < t.data.ndim:
        raise ValueError(f"axis {axis} out of range for shape {shape}")
    if not 0 <= index < shape[axis]:
        raise ValueError(f"index {index} out of range for axis {axis} of shape {shape}")
    out = np.take(t.data, index, axis=axis)

    def pullback(g):
        full = np.zeros(shape)
        key = (slice(None),) * axis + (index,)
        full[key] = g
        return (full,)

    return _emit((t,), out, pullback)


def masked_fill(t: Tensor, where, value: float) -> Tensor:
    """Overwrite the selected entries with a constant; grads pass elsewhere."""
    t = _as_tensor(t)
    sel = np.broadcast_to(np.asarray(where, dtype=bool), t.data.shape)
    out = np.where(sel, float(value), t.data)

    def pullback(g):
        return (np.where(sel, 0.0, g),)

    return _emit((t,), out, pullback)


# ---------------------------------------------------------------------------
# softmax


def softmax_over_axis(t: Tensor, axis: int) -> Tensor:
    """Numerically stable softmax along one axis (max is always subtracted)."""
    t = _as_tensor(t)
    axis = axis if axis >= 0 else axis + t.data.ndim
    if not 0 <= axis < t.data.ndim:
        raise ValueError(f"axis {axis} out of range for shape {t.shape}")
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def pullback(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - inner),)

    return _emit((t,), s, pullback)


# ---------------------------------------------------------------------------
# convolution


class Kernel2D:
    """Square correlation stencil with integer dilation.

    ``weights`` is either a shared ``(k, k)`` stencil applied to every channel
    independently, or — with ``per_channel=True`` — a ``(C, k, k)`` stack
    giving each channel its own stencil (a depthwise convolution). In both
    modes the output keeps the input's channel count.
    """

    def __init__(self, weights, dilation: int = 1, per_channel: bool = False):
        w = weights if isinstance(weights, Tensor) else Tensor(weights)
        expected = 3 if per_channel else 2
        if w.data.ndim != expected:
            raise ValueError(
                f"kernel weights must be {expected}-d "
                f"(per_channel={per_channel}), got shape {w.shape}"
            )
        k = w.data.shape[-1]
        if w.data.shape[-2] != k:
            raise ValueError(f"kernel must be square, got shape {w.shape}")
        if k % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {k}")
        if dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {dilation}")
        self.weights = w
        self.dilation = int(dilation)
        self.per_channel = bool(per_channel)

    @property
    def size(self) -> int:
        return self.weights.data.shape[-1]

    @property
    def footprint(self) -> int:
        """Effective receptive field: (k - 1) * dilation + 1."""
        return (self.size - 1) * self.dilation + 1

    @staticmethod
    def delta(size: int = 3, channels: int | None = None,
              dilation: int = 1) -> "Kernel2D":
        """Identity stencil: a one at the center, zeros elsewhere."""
        w = np.zeros((size, size))
        w[size // 2, size // 2] = 1.0
        if channels is None:
            return Kernel2D(w, dilation=dilation)
        return Kernel2D(np.tile(w, (channels, 1, 1)), dilation=dilation,
                        per_channel=True)


def _fold_replicate(gp: Array, pad: int, h: int, w: int) -> Array:
    """Adjoint of replicate padding: collapse border rows/cols onto the edge."""
    rows = gp[:, :, pad:pad + h, :].copy()
    rows[:, :, 0, :] += gp[:, :, :pad, :].sum(axis=2)
    rows[:, :, -1, :] += gp[:, :, pad + h:, :].sum(axis=2)
    core = rows[:, :, :, pad:pad + w].copy()
    core[:, :, :, 0] += rows[:, :, :, :pad].sum(axis=3)
    core[:, :, :, -1] += rows[:, :, :, pad + w:].sum(axis=3)
    return core


def conv2d(t: Tensor, kernel: Kernel2D, padding: str = "replicate") -> Tensor:
    """Dilated cross-correlation over B x C x H x W with clamp-to-edge borders."""
    if padding != "replicate":
        raise ValueError(f"only replicate padding is supported, got {padding!r}")
    t = _as_tensor(t)
    if t.data.ndim != 4:
        raise ValueError(f"conv2d expects a 4-d tensor, got shape {t.shape}")
    b, c, h, w = t.data.shape
    kw = kernel.weights
    if kernel.per_channel and kw.data.shape[0] != c:
        raise ValueError(
            f"depthwise kernel carries {kw.data.shape[0]} channel stencils "
            f"but the input has {c} channels (shapes {kw.shape} vs {t.shape})"
        )
    k, d = kernel.size, kernel.dilation
    pad = (k // 2) * d
    xp = np.pad(t.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="edge")

    def tap(u: int, v: int) -> Array:
        return xp[:, :, u * d:u * d + h, v * d:v * d + w]

    out = np.zeros((b, c, h, w))
    for u in range(k):
        for v in range(k):
            coeff = kw.data[:, u, v].reshape(1, c, 1, 1) if kernel.per_channel \
                else kw.data[u, v]
            out += coeff * tap(u, v)

    per_channel = kernel.per_channel

    def pullback(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(kw.data)
        for u in range(k):
            for v in range(k):
                if per_channel:
                    coeff = kw.data[:, u, v].reshape(1, c, 1, 1)
                    gw[:, u, v] = np.einsum("bchw,bchw->c", g, tap(u, v))
                else:
                    coeff = kw.data[u, v]
                    gw[u, v] = float((g * tap(u, v)).sum())
                gxp[:, :, u * d:u * d + h, v * d:v * d + w] += coeff * g
        return _fold_replicate(gxp, pad, h, w), gw

    return _emit((t, kw), out, pullback)


def channel_project(t: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """1x1 projection across channels: out[b,o] = sum_c w[o,c] * x[b,c] + bias[o]."""
    t, weights, bias = _as_tensor(t), _as_tensor(weights), _as_tensor(bias)
    if t.data.ndim != 4:
        raise ValueError(f"channel_project expects a 4-d tensor, got shape {t.shape}")
    if weights.data.ndim != 2:
        raise ValueError(f"projection weights must be 2-d, got shape {weights.shape}")
    c_out, c_in = weights.data.shape
    if t.data.shape[1] != c_in:
        raise ValueError(
            f"projection expects {c_in} input channels, got {t.data.shape[1]} "
            f"(shapes {weights.shape} vs {t.shape})"
        )
    if bias.data.shape != (c_out,):
        raise ValueError(f"bias must have shape ({c_out},), got {bias.shape}")
    out = np.einsum("oc,bchw->bohw", weights.data, t.data) + \
        bias.data.reshape(1, c_out, 1, 1)

    def pullback(g):
        gx = np.einsum("oc,bohw->bchw", weights.data, g)
        gw = np.einsum("bohw,bchw->oc", g, t.data)
        gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return _emit((t, weights, bias), out, pullback)


# ---------------------------------------------------------------------------
# pooling


def adaptive_avg_pool(t: Tensor, out_h: int, out_w: int) -> Tensor:
    """Average-pool to an exact output size with floor-boundary bins.

    Bin ``i`` along a length-``H`` axis covers rows ``floor(i*H/out_h)`` up to
    (excluding) ``floor((i+1)*H/out_h)``; every input cell lands in exactly one
    bin, so the global mean is preserved whenever the sizes divide evenly.
    """
    t = _as_tensor(t)
    if t.data.ndim != 4:
        raise ValueError(f"adaptive_avg_pool expects a 4-d tensor, got shape {t.shape}")
    _, _, h, w = t.data.shape
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {(out_h, out_w)}")
    if out_h > h or out_w > w:
        raise ValueError(
            f"adaptive_avg_pool cannot upsample: {(h, w)} -> {(out_h, out_w)}"
        )
    row_edges = (np.arange(out_h) * h) // out_h
    col_edges = (np.arange(out_w) * w) // out_w
    row_counts = np.diff(np.append(row_edges, h))
    col_counts = np.diff(np.append(col_edges, w))
    sums = np.add.reduceat(t.data, row_edges, axis=2)
    sums = np.add.reduceat(sums, col_edges, axis=3)
    out = sums / (row_counts[:, None] * col_counts[None, :])

    row_map = np.searchsorted(row_edges, np.arange(h), side="right") - 1
    col_map = np.searchsorted(col_edges, np.arange(w), side="right") - 1
    denom = row_counts[row_map][:, None] * col_counts[col_map][None, :]

    def pullback(g):
        return (g[:, :, row_map[:, None], col_map[None, :]] / denom,)

    return _emit((t,), out, pullback)


# ---------------------------------------------------------------------------
# normalization


def l2_normalize(t: Tensor) -> Tensor:
    """Scale a vector to unit Euclidean norm."""
    t = _as_tensor(t)
    if t.data.ndim != 1:
        raise ValueError(f"l2_normalize expects a 1-d tensor, got shape {t.shape}")
    norm = float(np.sqrt(t.data @ t.data))
    if norm == 0.0:
        raise ValueError("cannot normalize a zero vector")
    y = t.data / norm

    def pullback(g):
        return ((g - y * (y @ g)) / norm,)

    return _emit((t,), y, pullback)
