"""Minimal reverse-mode autodiff on top of numpy.

Only the operations the denoising UNet needs are provided. Every op is a
:class:`Function` subclass with a hand-written backward; the graph of
executed ops (each stamped with a global sequence number) is the tape, and
:func:`backward` replays it in exact reverse execution order.
"""

from __future__ import annotations

import contextlib
import itertools
import logging
from typing import Any, Callable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_SEQ = itertools.count()


class TapeError(RuntimeError):
    """Raised when backward is misused (non-scalar loss, replayed tape)."""


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the dtype new tensors are created with."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording them on the tape."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Node:
    """One tape entry: the op that produced a tensor plus its inputs."""

    __slots__ = ("fn", "inputs", "seq", "consumed")

    def __init__(self, fn: "Function", inputs: tuple["Tensor", ...]):
        self.fn = fn
        self.inputs = inputs
        self.seq = next(_SEQ)
        self.consumed = False


class Tensor:
    """An n-dimensional array that can take part in a gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = _DEFAULT_DTYPE
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None
        self.name = name

    # ---- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # ---- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    def sum(self, axis=None, keepdims: bool = False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return mul(self.sum(axis=axis, keepdims=keepdims), 1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


class Function:
    """Base class for differentiable ops.

    ``forward`` receives raw arrays and may stash whatever backward needs on
    ``self``; ``backward`` gets the upstream gradient and returns one array
    (or None) per input.
    """

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        tensors = tuple(as_tensor(x) for x in inputs)
        fn = cls()
        fn.needs = tuple(t.requires_grad for t in tensors)
        out = Tensor(fn.forward(*(t.data for t in tensors), **kwargs))
        if _GRAD_ENABLED and any(fn.needs):
            out.requires_grad = True
            out._node = Node(fn, tensors)
        return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---- elementwise and structural ops -------------------------------------

class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        ga = _unbroadcast(grad * self.b, self.a.shape) if self.needs[0] else None
        gb = _unbroadcast(grad * self.a, self.b.shape) if self.needs[1] else None
        return ga, gb


class MatMul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        ga = gb = None
        if self.needs[0]:
            ga = _unbroadcast(grad @ np.swapaxes(self.b, -1, -2), self.a.shape)
        if self.needs[1]:
            gb = _unbroadcast(np.swapaxes(self.a, -1, -2) @ grad, self.b.shape)
        return ga, gb


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape = a.shape
        self.axis = axis
        self.keepdims = keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    def forward(self, a, axes=None):
        self.axes = axes if axes is not None else tuple(reversed(range(a.ndim)))
        return np.transpose(a, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class GetItem(Function):
    def forward(self, a, index):
        self.shape, self.dtype, self.index = a.shape, a.dtype, index
        return a[index]

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=self.dtype)
        if _has_advanced(self.index):
            np.add.at(out, self.index, grad)
        else:
            out[self.index] = grad
        return (out,)


def _has_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


class SiLU(Function):
    def forward(self, x):
        self.x = x
        # clip keeps exp finite for very negative inputs
        self.sig = 1.0 / (1.0 + np.exp(-np.clip(x, -60, 60)))
        return x * self.sig

    def backward(self, grad):
        s = self.sig
        return (grad * (s * (1.0 + self.x * (1.0 - s))),)


class Linear(Function):
    """y = x @ W.T + b over the last axis; W is (out, in)."""

    def forward(self, x, w, b):
        self.x, self.w = x, w
        return x @ w.T + b

    def backward(self, grad):
        g2 = grad.reshape(-1, grad.shape[-1])
        gx = (grad @ self.w) if self.needs[0] else None
        gw = g2.T @ self.x.reshape(-1, self.x.shape[-1]) if self.needs[1] else None
        gb = g2.sum(axis=0) if self.needs[2] else None
        return gx, gw, gb


class Conv2d(Function):
    """Zero-padded 2-D cross-correlation in NCHW layout via im2col."""

    def forward(self, x, w, b, stride=1, pad=0):
        self.xshape, self.stride, self.pad = x.shape, stride, pad
        self.w = w
        out, self.cols = _im2col_conv(x, w, stride, pad)
        self.outhw = out.shape[2:]
        out += b.reshape(1, -1, 1, 1)
        return out

    def backward(self, grad):
        n, c, h, wd = self.xshape
        o, _, kh, kw = self.w.shape
        ho, wo = self.outhw
        s, p = self.stride, self.pad
        # (O, N*Ho*Wo)
        g2 = np.ascontiguousarray(grad.transpose(1, 0, 2, 3)).reshape(o, -1)
        gx = gw = gb = None
        if self.needs[1]:
            gw = (g2 @ self.cols.T).reshape(self.w.shape)
        if self.needs[2]:
            gb = g2.sum(axis=1)
        if self.needs[0]:
            if s == 1 and p <= kh - 1 and p <= kw - 1:
                # input grad of a stride-1 conv is a correlation with the flipped kernel
                wf = np.ascontiguousarray(self.w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
                gpad = ((0, 0), (0, 0), (kh - 1 - p, kh - 1 - p), (kw - 1 - p, kw - 1 - p))
                gx, _ = _im2col_conv(np.pad(grad, gpad) if kh > 1 or kw > 1 else grad, wf, 1, 0)
            else:
                dcols = (self.w.reshape(o, -1).T @ g2).reshape(c, kh, kw, n, ho, wo)
                gxp = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=grad.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, i, j].transpose(1, 0, 2, 3)
                gx = gxp[:, :, p:p + h, p:p + wd]
        return gx, gw, gb


def _im2col_conv(x, w, stride, pad):
    """Return (conv output without bias, column matrix of shape (C*kh*kw, N*Ho*Wo))."""
    n, c = x.shape[:2]
    o, _, kh, kw = w.shape
    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        ho, wo = x.shape[2:]
        cols = np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(c, -1)
    else:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        ho, wo = win.shape[2], win.shape[3]
        cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * ho * wo)
    out = w.reshape(o, -1) @ cols
    return np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)), cols


class GroupNorm(Function):
    def forward(self, x, gamma, beta, groups=8, eps=1e-5):
        n, c = x.shape[:2]
        xg = x.reshape(n, groups, -1)
        mu = xg.mean(axis=2, keepdims=True)
        var = xg.var(axis=2, keepdims=True)
        self.rstd = 1.0 / np.sqrt(var + eps)
        self.xhat = ((xg - mu) * self.rstd).reshape(x.shape)
        self.gamma, self.groups = gamma, groups
        bshape = (1, c) + (1,) * (x.ndim - 2)
        self.bshape = bshape
        return self.xhat * gamma.reshape(bshape) + beta.reshape(bshape)

    def backward(self, grad):
        n, c = grad.shape[:2]
        red = (0,) + tuple(range(2, grad.ndim))
        gg = (grad * self.xhat).sum(axis=red) if self.needs[1] else None
        gb = grad.sum(axis=red) if self.needs[2] else None
        gx = None
        if self.needs[0]:
            dxhat = (grad * self.gamma.reshape(self.bshape)).reshape(n, self.groups, -1)
            xhat = self.xhat.reshape(n, self.groups, -1)
            gx = self.rstd * (dxhat - dxhat.mean(axis=2, keepdims=True)
                              - xhat * (dxhat * xhat).mean(axis=2, keepdims=True))
            gx = gx.reshape(grad.shape)
        return gx, gg, gb


class Upsample2x(Function):
    def forward(self, x):
        return x.repeat(2, axis=-2).repeat(2, axis=-1)

    def backward(self, grad):
        *lead, h, w = grad.shape
        return (grad.reshape(*lead, h // 2, 2, w // 2, 2).sum(axis=(-3, -1)),)


class AvgPool2x(Function):
    def forward(self, x):
        *lead, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"avgpool2x needs even spatial extents, got {h}x{w}")
        return x.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))

    def backward(self, grad):
        return (0.25 * grad.repeat(2, axis=-2).repeat(2, axis=-1),)


# optional sink for attention probabilities (diagnostics only)
_ATTENTION_SINK: Optional[list] = None


@contextlib.contextmanager
def capture_attention() -> Iterator[list]:
    """Collect the softmax weight tensors of every attention call."""
    global _ATTENTION_SINK
    prev = _ATTENTION_SINK
    _ATTENTION_SINK = []
    try:
        yield _ATTENTION_SINK
    finally:
        _ATTENTION_SINK = prev


class Attention(Function):
    """softmax(q k^T / sqrt(d)) v over the last two axes, any leading batch."""

    def forward(self, q, k, v):
        d = q.shape[-1]
        self.scale = 1.0 / np.sqrt(d)
        p = q @ np.swapaxes(k, -1, -2)
        p *= self.scale
        p -= p.max(axis=-1, keepdims=True)
        np.exp(p, out=p)
        p /= p.sum(axis=-1, keepdims=True)
        if _ATTENTION_SINK is not None:
            _ATTENTION_SINK.append(p.copy())
        self.q, self.k, self.v, self.p = q, k, v, p
        return p @ v

    def backward(self, grad):
        p = self.p
        gv = np.swapaxes(p, -1, -2) @ grad if self.needs[2] else None
        ds = grad @ np.swapaxes(self.v, -1, -2)
        ds -= (ds * p).sum(axis=-1, keepdims=True)
        ds *= p
        ds *= self.scale
        gq = ds @ self.k if self.needs[0] else None
        gk = np.swapaxes(ds, -1, -2) @ self.q if self.needs[1] else None
        return gq, gk, gv


# ---- public functional API ---------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    return Add.apply(a, as_tensor(b, a.dtype))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    return Mul.apply(a, as_tensor(b, a.dtype))


def matmul(a, b) -> Tensor:
    return MatMul.apply(a, b)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def silu(x) -> Tensor:
    return SiLU.apply(x)


def linear(x, w, b) -> Tensor:
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"linear: input features {x.shape[-1]} != weight in-features {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ValueError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
    return Linear.apply(x, w, b)


def conv2d(x, w, b, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution (cross-correlation), NCHW input, OCkk kernel."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 4:
        raise ValueError(f"conv2d: input must be 4-D NCHW, got shape {x.shape}")
    if w.ndim != 4:
        raise ValueError(f"conv2d: kernel must be 4-D OCkk, got shape {w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ValueError(f"conv2d: channel axis mismatch, input C={c} but kernel C={ci}")
    if b.shape != (o,):
        raise ValueError(f"conv2d: bias axis mismatch, expected ({o},) got {b.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if stride < 1 or pad < 0:
        raise ValueError("conv2d: stride must be >= 1 and pad >= 0")
    for axis, size, k in (("height", h, kh), ("width", wd, kw)):
        span = size + 2 * pad - k
        if span < 0:
            raise ValueError(f"conv2d: {axis} axis too small ({size}+2*{pad} < {k})")
        if span % stride:
            raise ValueError(f"conv2d: {axis} axis geometry ({size}+2*{pad}-{k}) not divisible by stride {stride}")
    return Conv2d.apply(x, w, b, stride=stride, pad=pad)


def group_norm(x, groups: int, gamma, beta, eps: float = 1e-5) -> Tensor:
    x = as_tensor(x)
    c = x.shape[1]
    if groups < 1 or c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible into {groups} groups")
    return GroupNorm.apply(x, gamma, beta, groups=groups, eps=eps)


def nearest_upsample2x(x) -> Tensor:
    return Upsample2x.apply(x)


def avgpool2x(x) -> Tensor:
    return AvgPool2x.apply(x)


def softmax_attention(q, k, v) -> Tensor:
    """Scaled dot-product attention; accepts [p, d] or batched [..., p, d]."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] == 0:
        raise ValueError("softmax_attention: feature dim d must be > 0")
    if q.shape != k.shape or k.shape[:-1] != v.shape[:-1]:
        raise ValueError(f"softmax_attention: shape mismatch q{q.shape} k{k.shape} v{v.shape}")
    for name, t in (("q", q), ("k", k), ("v", v)):
        if not np.all(np.isfinite(t.data)):
            raise ValueError(f"softmax_attention: non-finite values in {name}")
    return Attention.apply(q, k, v)


# ---- backward / tape ----------------------------------------------------

class GradTape:
    """Ops reachable from a loss, ordered by execution sequence."""

    def __init__(self, loss: Tensor):
        nodes: dict[int, Node] = {}
        stack = [loss._node] if loss._node is not None else []
        while stack:
            node = stack.pop()
            if id(node) in nodes:
                continue
            nodes[id(node)] = node
            stack.extend(t._node for t in node.inputs if t._node is not None)
        self.nodes = sorted(nodes.values(), key=lambda nd: nd.seq)

    def __len__(self) -> int:
        return len(self.nodes)

    def reversed(self) -> list[Node]:
        return self.nodes[::-1]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf."""
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            _accumulate(loss, np.ones_like(loss.data))
        return
    if loss._node.consumed:
        raise TapeError("backward already run on this tape")
    tape = GradTape(loss)
    pending: dict[int, np.ndarray] = {id(loss._node): np.ones_like(loss.data)}
    leaf_grads: dict[int, tuple[Tensor, np.ndarray]] = {}
    for node in tape.reversed():
        grad = pending.pop(id(node), None)
        node.consumed = True
        if grad is None:
            continue
        in_grads = node.fn.backward(grad)
        for inp, g in zip(node.inputs, in_grads):
            if g is None or not inp.requires_grad:
                continue
            if inp._node is not None:
                key = id(inp._node)
                pending[key] = pending[key] + g if key in pending else g
            else:
                key = id(inp)
                if key in leaf_grads:
                    leaf_grads[key] = (inp, leaf_grads[key][1] + g)
                else:
                    leaf_grads[key] = (inp, g)
        node.fn = _Spent  # release saved activations
    for leaf, g in leaf_grads.values():
        _accumulate(leaf, g)


class _Spent:
    pass


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
    if leaf.grad is None:
        leaf.grad = g.copy()
    else:
        leaf.grad += g


# ---- finite-difference harness -----------------------------------------

def finite_diff_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-4,
    num_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Worst relative error between backward grads and central differences.

    ``fn(*inputs)`` must return a scalar tensor. All coordinates of every
    input are probed unless ``num_coords`` asks for a random subset.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    loss = fn(*inputs)
    backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    coords = [(i, j) for i, t in enumerate(inputs) for j in range(t.size)]
    if num_coords is not None and num_coords < len(coords):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=num_coords, replace=False)
        coords = [coords[p] for p in sorted(pick)]

    worst = 0.0
    with no_grad():
        for i, j in coords:
            flat = inputs[i].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + eps
            fp = fn(*inputs).item()
            flat[j] = orig - eps
            fm = fn(*inputs).item()
            flat[j] = orig
            numeric = (fp - fm) / (2 * eps)
            a = float(analytic[i].reshape(-1)[j])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
