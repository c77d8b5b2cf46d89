"""A small dense-tensor engine with tape-based reverse-mode differentiation.

Only the operations the codec backbone needs are provided. Feature maps are
laid out as ``C x H x W`` or batch-prefixed ``B x C x H x W``; every spatial
op works on the trailing three axes.

Each op that touches a tensor with ``requires_grad`` records a node holding
its inputs and a closure mapping the output gradient to input gradients.
:func:`backward` walks those nodes in reverse topological order, accumulates
into leaf ``.grad`` arrays, and then releases the recorded closures so that a
graph can only be differentiated once.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import AutogradError, NumericalError, ShapeError

DTYPE = np.float32

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable recording for the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """Dense array of reals with an optional gradient.

    ``data`` is a numpy array, float32 unless a dtype is passed explicitly
    (float64 is used only by finite-difference checks).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            dtype = data.data.dtype if dtype is None else dtype
            data = data.data
        if dtype is None:
            dtype = DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False

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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _chw(t: Tensor, op: str) -> tuple[int, int, int]:
    if t.ndim not in (3, 4):
        raise ShapeError(f"{op}: expected C x H x W or B x C x H x W, got shape {t.shape}")
    return t.shape[-3], t.shape[-2], t.shape[-1]


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul_elementwise(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


mul = mul_elementwise


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, a.data.dtype.type(0)), (a,), lambda g: (g * mask,))


def clamp(a: Tensor, lo: float = 0.0, hi: float = 1.0) -> Tensor:
    # gradient passes only where the input is strictly inside the range
    mask = (a.data > lo) & (a.data < hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2 * g * ad,))


def sum_all(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.data.dtype
    return _make(np.asarray(a.data.sum(dtype=dtype), dtype=dtype), (a,),
                 lambda g: (np.full(shape, g, dtype=dtype),))


def mean(a: Tensor) -> Tensor:
    shape, dtype, n = a.shape, a.data.dtype, a.data.size
    return _make(np.asarray(a.data.mean(dtype=dtype), dtype=dtype), (a,),
                 lambda g: (np.full(shape, g / n, dtype=dtype),))


def stop_gradient(a: Tensor) -> Tensor:
    return a.detach()


def straight_through(x: Tensor, quantized) -> Tensor:
    """Forward value ``quantized``; backward passes the gradient to ``x`` unchanged."""
    q = quantized.data if isinstance(quantized, Tensor) else np.asarray(quantized, dtype=x.data.dtype)
    if q.shape != x.shape:
        raise ShapeError(f"straight_through: shape mismatch {x.shape} vs {q.shape}")
    return _make(q.astype(x.data.dtype, copy=True), (x,), lambda g: (g,))


# ---------------------------------------------------------------------------
# channel ops


def chunk2(t: Tensor) -> tuple[Tensor, Tensor]:
    """Split along the channel axis into first half and second half."""
    c, _, _ = _chw(t, "chunk2")
    if c % 2:
        raise ShapeError(f"chunk2: channel count {c} is odd")
    h = c // 2
    shape, dtype = t.shape, t.data.dtype

    def grad_half(lo):
        def fn(g):
            full = np.zeros(shape, dtype=dtype)
            full[..., lo:lo + h, :, :] = g
            return (full,)
        return fn

    first = _make(t.data[..., :h, :, :].copy(), (t,), grad_half(0))
    second = _make(t.data[..., h:, :, :].copy(), (t,), grad_half(h))
    return first, second


def channel_affine(t: Tensor, scale_table: Tensor, bias_table: Tensor, row: int) -> Tensor:
    """``t * scale_table[row] + bias_table[row]`` with per-channel vectors.

    The tables are ``R x C``; only the selected row receives gradient.
    """
    c, _, _ = _chw(t, "channel_affine")
    if scale_table.shape != bias_table.shape or scale_table.ndim != 2 or scale_table.shape[1] != c:
        raise ShapeError(
            f"channel_affine: tables {scale_table.shape}/{bias_table.shape} do not fit {c} channels")
    if not 0 <= row < scale_table.shape[0]:
        raise ShapeError(f"channel_affine: row {row} outside table of {scale_table.shape[0]} rows")
    s = scale_table.data[row][:, None, None]
    b = bias_table.data[row][:, None, None]
    td = t.data
    red = (0, 2, 3) if t.ndim == 4 else (1, 2)

    def fn(g):
        gs = np.zeros_like(scale_table.data)
        gb = np.zeros_like(bias_table.data)
        gs[row] = (g * td).sum(axis=red)
        gb[row] = g.sum(axis=red)
        return g * s, gs, gb

    return _make(td * s + b, (t, scale_table, bias_table), fn)


def pixel_unshuffle(t: Tensor, factor: int) -> Tensor:
    """Space-to-depth. Output channel ``c*f*f + dy*f + dx`` holds ``in[c, y*f+dy, x*f+dx]``."""
    c, h, w = _chw(t, "pixel_unshuffle")
    f = int(factor)
    if f < 1:
        raise ShapeError(f"pixel_unshuffle: factor must be positive, got {factor}")
    if h % f:
        raise ShapeError(f"pixel_unshuffle: height {h} not divisible by {f}")
    if w % f:
        raise ShapeError(f"pixel_unshuffle: width {w} not divisible by {f}")
    lead = t.shape[:-3]
    k = len(lead)
    x = t.data.reshape(*lead, c, h // f, f, w // f, f)
    perm = tuple(range(k)) + (k, k + 2, k + 4, k + 1, k + 3)
    out = np.ascontiguousarray(x.transpose(perm)).reshape(*lead, c * f * f, h // f, w // f)
    return _make(out, (t,), lambda g: (_shuffle_array(g, f),))


def _shuffle_array(x: np.ndarray, f: int) -> np.ndarray:
    lead = x.shape[:-3]
    k = len(lead)
    c, h, w = x.shape[-3:]
    y = x.reshape(*lead, c // (f * f), f, f, h, w)
    perm = tuple(range(k)) + (k, k + 3, k + 1, k + 4, k + 2)
    return np.ascontiguousarray(y.transpose(perm)).reshape(*lead, c // (f * f), h * f, w * f)


def _unshuffle_array(x: np.ndarray, f: int) -> np.ndarray:
    lead = x.shape[:-3]
    k = len(lead)
    c, h, w = x.shape[-3:]
    y = x.reshape(*lead, c, h // f, f, w // f, f)
    perm = tuple(range(k)) + (k, k + 2, k + 4, k + 1, k + 3)
    return np.ascontiguousarray(y.transpose(perm)).reshape(*lead, c * f * f, h // f, w // f)


def pixel_shuffle(t: Tensor, factor: int) -> Tensor:
    """Depth-to-space; exact inverse of :func:`pixel_unshuffle`."""
    c, _, _ = _chw(t, "pixel_shuffle")
    f = int(factor)
    if f < 1:
        raise ShapeError(f"pixel_shuffle: factor must be positive, got {factor}")
    if c % (f * f):
        raise ShapeError(f"pixel_shuffle: channel count {c} not divisible by {f * f}")
    return _make(_shuffle_array(t.data, f), (t,), lambda g: (_unshuffle_array(g, f),))


# ---------------------------------------------------------------------------
# convolutions


def conv_depthwise(t: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Per-channel k x k cross-correlation, stride 1, zero same-padding."""
    c, h, w = _chw(t, "conv_depthwise")
    if kernels.ndim != 3 or kernels.shape[0] != c or kernels.shape[1] != kernels.shape[2]:
        raise ShapeError(f"conv_depthwise: kernels {kernels.shape} do not fit {c} channels")
    if bias.shape != (c,):
        raise ShapeError(f"conv_depthwise: bias {bias.shape} does not fit {c} channels")
    k = kernels.shape[1]
    if k % 2 == 0:
        raise ShapeError(f"conv_depthwise: kernel size {k} must be odd")
    p = k // 2
    pad = [(0, 0)] * (t.ndim - 2) + [(p, p), (p, p)]
    xp = np.pad(t.data, pad)
    kd = kernels.data
    # accumulate in float64, round once
    acc = np.empty(t.shape, dtype=np.float64)
    acc[...] = bias.data[:, None, None]
    for i in range(k):
        for j in range(k):
            acc += kd[:, i, j][:, None, None].astype(np.float64) * xp[..., i:i + h, j:j + w]
    out = acc.astype(t.data.dtype)
    red = (0, 2, 3) if t.ndim == 4 else (1, 2)

    def fn(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(kd)
        for i in range(k):
            for j in range(k):
                gxp[..., i:i + h, j:j + w] += kd[:, i, j][:, None, None] * g
                gk[:, i, j] = (g * xp[..., i:i + h, j:j + w]).sum(axis=red)
        return gxp[..., p:p + h, p:p + w], gk, g.sum(axis=red)

    return _make(out, (t, kernels, bias), fn)


def conv_pointwise(t: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """1x1 convolution: ``out[o] = sum_c weight[o, c] * in[c] + bias[o]``."""
    c, h, w = _chw(t, "conv_pointwise")
    if weight.ndim != 2 or weight.shape[1] != c:
        raise ShapeError(f"conv_pointwise: weight {weight.shape} does not fit {c} input channels")
    co = weight.shape[0]
    if bias.shape != (co,):
        raise ShapeError(f"conv_pointwise: bias {bias.shape} does not fit {co} output channels")
    lead = t.shape[:-3]
    x = t.data.reshape(*lead, c, h * w)
    wd = weight.data
    out = (np.matmul(wd, x) + bias.data[:, None]).reshape(*lead, co, h, w)

    def fn(g):
        g2 = g.reshape(*lead, co, h * w)
        gx = np.matmul(wd.T, g2).reshape(t.shape)
        if lead:
            gw = np.matmul(g2.transpose(1, 0, 2).reshape(co, -1), x.transpose(1, 0, 2).reshape(c, -1).T)
            gb = g2.sum(axis=(0, 2))
        else:
            gw = g2 @ x.T
            gb = g2.sum(axis=1)
        return gx, gw, gb

    return _make(out, (t, weight, bias), fn)


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate across calls; call :meth:`Tensor.zero_grad` (or
    :func:`zero_grads`) to reset them. The recorded graph is released after
    the pass, so a second call on the same loss raises.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise AutogradError("backward already ran on this graph; rebuild the forward pass")
    if not loss.requires_grad:
        raise AutogradError("loss does not depend on any tensor that requires grad")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.data.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if node._consumed:
                raise AutogradError("backward reached a graph that was already differentiated")
            if node.requires_grad and g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.data.dtype).reshape(parent.shape)
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._consumed = True


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# optimizer


class Parameter:
    """A trainable tensor plus its Adam moment estimates."""

    def __init__(self, value, name: str = ""):
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self.value.requires_grad = True
        self.name = name
        self.adam_m = np.zeros(self.value.size, dtype=self.value.dtype)
        self.adam_v = np.zeros(self.value.size, dtype=self.value.dtype)
        self.step_count = 0

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.value.grad

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def adam_step(params: Sequence[Parameter], grads: Sequence[np.ndarray | None] | None = None,
              lr: float = 1e-4, beta1: float = 0.5, beta2: float = 0.9, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place.

    ``grads`` defaults to each parameter's accumulated ``.grad``; a missing
    gradient is treated as zero. All gradients are validated before any
    parameter moves.
    """
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params):
        raise ShapeError(f"adam_step: {len(params)} parameters but {len(grads)} gradients")
    flat = []
    for p, g in zip(params, grads):
        if p.adam_m.size != p.value.size or p.adam_v.size != p.value.size:
            raise ShapeError(f"adam_step: optimizer state of {p.name or p!r} has the wrong length")
        g = np.zeros(p.value.size, p.value.dtype) if g is None else np.asarray(g, p.value.dtype).reshape(-1)
        if g.size != p.value.size:
            raise ShapeError(f"adam_step: gradient for {p.name or p!r} has {g.size} entries, "
                             f"expected {p.value.size}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"adam_step: non-finite gradient for parameter {p.name or p!r}")
        flat.append(g)
    dt = DTYPE
    b1, b2 = dt(beta1), dt(beta2)
    for p, g in zip(params, flat):
        p.step_count += 1
        p.adam_m *= b1
        p.adam_m += (1 - b1) * g
        p.adam_v *= b2
        p.adam_v += (1 - b2) * g * g
        m_hat = p.adam_m / dt(1 - beta1 ** p.step_count)
        v_hat = p.adam_v / dt(1 - beta2 ** p.step_count)
        update = dt(lr) * m_hat / (np.sqrt(v_hat) + dt(eps))
        p.value.data -= update.reshape(p.value.shape).astype(p.value.dtype)
