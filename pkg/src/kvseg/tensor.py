"""Minimal n-dimensional tensor with reverse-mode differentiation.

All arrays are row-major numpy buffers. Shape conventions used by the ops:

* ``matmul``: ``(..., m, k) @ (k, n)`` or ``(..., m, k) @ (..., k, n)``; a 1-D
  right operand ``(k,)`` contracts the last axis.
* image ops (``conv2d``, ``max_pool2d``, ``upsample_bilinear_2x``,
  ``batch_norm``): ``(N, C, H, W)``; ``conv2d`` and the upsampler also accept
  an unbatched ``(C, H, W)``.
* ``softmax_rows`` / ``layer_norm``: normalise over the last axis.

A computation graph runs in a single precision mode (``"single"`` or
``"double"``); mixing dtypes inside one op raises ``TypeError``.
"""

from __future__ import annotations

import contextlib
import io
import struct
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import DimensionError, FormatError, NumericError

PRECISIONS = {"single": np.float32, "double": np.float64}

_default_dtype = np.float32
_grad_enabled = True
_corrupt: dict[str, float] = {}
_branches: list[bytes] | None = None


def get_precision() -> str:
    return "double" if _default_dtype == np.float64 else "single"


def set_precision(mode: str) -> None:
    global _default_dtype
    if mode not in PRECISIONS:
        raise ValueError(f"unknown precision {mode!r}; expected one of {sorted(PRECISIONS)}")
    _default_dtype = PRECISIONS[mode]


@contextlib.contextmanager
def precision(mode: str) -> Iterator[None]:
    """Temporarily switch the dtype used for newly created tensors."""
    previous = get_precision()
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


@contextlib.contextmanager
def corrupt_backward(op: str, factor: float = 1.01) -> Iterator[None]:
    """Test hook: scale the incoming gradient of every ``op`` node by ``factor``.

    Used as a negative control for gradient checking.
    """
    _corrupt[op] = factor
    try:
        yield
    finally:
        _corrupt.pop(op, None)


@contextlib.contextmanager
def record_branches() -> Iterator[list[bytes]]:
    """Collect the branch taken by every piecewise op (ReLU sign pattern,
    max-pool argmax) evaluated inside the block, in call order.

    Two evaluations that yield equal lists lie on the same smooth piece.
    """
    global _branches
    previous, _branches = _branches, []
    try:
        yield _branches
    finally:
        _branches = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or _default_dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise NumericError(f"non-finite values produced by {op}")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties ---------------------------------------------------
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    # -- autograd -----------------------------------------------------------
    def backward(self, grad=None) -> None:
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            if node.op in _corrupt:
                g = g * _corrupt[node.op]
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=like.dtype)


def _check_dtypes(*tensors: Tensor) -> None:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise TypeError(f"mixed precision in one graph: {dt} vs {t.dtype}")


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    _check_dtypes(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add"
    )


def sub(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    _check_dtypes(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub"
    )


def mul(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    _check_dtypes(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(ad * bd, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _branches is not None:
        _branches.append(np.packbits(mask).tobytes())
    return Tensor._from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


_SQRT1_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _SQRT1_2))
    out = (xd * cdf).astype(x.dtype)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return ((g * (cdf + xd * pdf)).astype(xd.dtype),)

    return Tensor._from_op(out, (x,), backward, "gelu")


# ---------------------------------------------------------------------------
# shape ops and reductions
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return Tensor._from_op(out, (x,), lambda g: (g.transpose(inverse),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Tensor._from_op(np.asarray(out, dtype=x.dtype), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with batch broadcasting; backward gives transposed products."""
    _check_dtypes(a, b)
    if a.ndim < 2 or b.ndim < 1:
        raise DimensionError(f"matmul needs a matrix left operand, got {a.shape} @ {b.shape}")
    k_b = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if a.shape[-1] != k_b:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = gb = None
        if bd.ndim == 1:
            if a.requires_grad:
                ga = np.multiply.outer(g, bd)
            if b.requires_grad:
                gb = g.reshape(-1) @ ad.reshape(-1, ad.shape[-1])
            return ga, gb
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return Tensor._from_op(out, (a, b), backward, "matmul")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, with per-row max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(y, (x,), backward, "softmax")


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

LN_EPS = 1e-5
BN_EPS = 1e-5


def _norm_backward(g_hat: np.ndarray, x_hat: np.ndarray, inv_std: np.ndarray, axes) -> np.ndarray:
    m1 = g_hat.mean(axis=axes, keepdims=True)
    m2 = (g_hat * x_hat).mean(axis=axes, keepdims=True)
    return inv_std * (g_hat - m1 - x_hat * m2)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    _check_dtypes(x, gamma, beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine shape must be ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    gd = gamma.data
    out = x_hat * gd + beta.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx = _norm_backward(g * gd, x_hat, inv_std, -1) if x.requires_grad else None
        return gx, (g * x_hat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._from_op(out, (x, gamma, beta), backward, "layer_norm")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalisation of an ``(N, C, H, W)`` batch.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, torch convention).
    """
    _check_dtypes(x, gamma, beta)
    if x.ndim != 4:
        raise DimensionError(f"batch_norm expects (N, C, H, W), got {x.shape}")
    c = x.shape[1]
    shape = (1, c, 1, 1)
    axes = (0, 2, 3)
    gd = gamma.data.reshape(shape)
    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        centered = x.data - mu
        var = (centered * centered).mean(axis=axes, keepdims=True)
        count = x.size // c
        unbiased = var * (count / max(count - 1, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased.reshape(c)
    else:
        mu = running_mean.reshape(shape)
        centered = x.data - mu
        var = running_var.reshape(shape)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    out = (x_hat * gd + beta.data.reshape(shape)).astype(x.dtype)

    def backward(g):
        gx = None
        if x.requires_grad:
            if training:
                gx = _norm_backward(g * gd, x_hat, inv_std, axes)
            else:
                gx = g * gd * inv_std
        return gx, (g * x_hat).sum(axis=axes), g.sum(axis=axes)

    return Tensor._from_op(out, (x, gamma, beta), backward, "batch_norm")


# ---------------------------------------------------------------------------
# convolution, pooling, upsampling
# ---------------------------------------------------------------------------


def _out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    v = sliding_window_view(xp, (k, k), axis=(2, 3))
    return v[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _batched(fn):
    """Let an (N, C, H, W) op accept an unbatched (C, H, W) tensor."""

    def wrapper(x: Tensor, *args, **kwargs):
        if x.ndim == 3:
            out = fn(reshape(x, (1,) + x.shape), *args, **kwargs)
            return reshape(out, out.shape[1:])
        if x.ndim != 4:
            raise DimensionError(f"{fn.__name__} expects (C, H, W) or (N, C, H, W), got {x.shape}")
        return fn(x, *args, **kwargs)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_batched
def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """Cross-correlation. ``weight`` is ``(C_out, C_in / groups, k, k)``."""
    parents = (x, weight) if bias is None else (x, weight, bias)
    _check_dtypes(*parents)
    n, c, h, w = x.shape
    co, cg, k, k2 = weight.shape
    if k != k2:
        raise DimensionError("only square kernels are supported")
    if c % groups or co % groups or cg != c // groups:
        raise DimensionError(f"conv2d channel mismatch: input {c}, weight {weight.shape}, groups {groups}")
    ho, wo = _out_size(h, k, stride, padding), _out_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d output would be {ho}x{wo} for input {h}x{w}, kernel {k}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = _windows(xp, k, stride, ho, wo)
    wd = weight.data
    og = co // groups
    if groups == 1:
        out = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    else:
        win_g = win.reshape(n, groups, cg, ho, wo, k, k)
        out = np.einsum("ngchwij,gocij->ngohw", win_g, wd.reshape(groups, og, cg, k, k), optimize=True)
        out = out.reshape(n, co, ho, wo)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out = out + bias.data.reshape(1, co, 1, 1)

    def backward(g):
        gx = gw = None
        if groups == 1:
            if weight.requires_grad:
                gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            if x.requires_grad:
                cols = np.tensordot(g, wd, axes=([1], [0]))  # (n, ho, wo, c, k, k)
                cols = cols.transpose(0, 3, 1, 2, 4, 5)
        else:
            gr = g.reshape(n, groups, og, ho, wo)
            wr = wd.reshape(groups, og, cg, k, k)
            if weight.requires_grad:
                win_g = win.reshape(n, groups, cg, ho, wo, k, k)
                gw = np.einsum("ngohw,ngchwij->gocij", gr, win_g, optimize=True).reshape(wd.shape)
            if x.requires_grad:
                cols = np.einsum("ngohw,gocij->ngchwij", gr, wr, optimize=True).reshape(n, c, ho, wo, k, k)
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            span_h, span_w = (ho - 1) * stride + 1, (wo - 1) * stride + 1
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + span_h : stride, j : j + span_w : stride] += cols[..., i, j]
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Tensor._from_op(out, parents, backward, "conv2d")


def max_pool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"max_pool2d expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = _out_size(h, kernel, stride, padding), _out_size(w, kernel, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"max_pool2d output would be {ho}x{wo}")
    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad, constant_values=-np.inf) if padding else x.data
    win = _windows(xp, kernel, stride, ho, wo).reshape(n, c, ho, wo, kernel * kernel)
    idx = win.argmax(axis=-1)
    if _branches is not None:
        _branches.append(idx.astype(np.int32).tobytes())
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        rows = np.arange(ho)[:, None] * stride + idx // kernel
        cols = np.arange(wo)[None, :] * stride + idx % kernel
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(gxp, (ni, ci, rows, cols), g)
        return (gxp[:, :, padding : padding + h, padding : padding + w],)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward, "max_pool2d")


def bilinear_matrix(size: int, dtype=np.float64) -> np.ndarray:
    """``(2*size, size)`` interpolation matrix with half-pixel centres."""
    m = np.zeros((2 * size, size), dtype=dtype)
    for o in range(2 * size):
        src = max((o + 0.5) / 2.0 - 0.5, 0.0)
        i0 = min(int(np.floor(src)), size - 1)
        i1 = min(i0 + 1, size - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    return m


@_batched
def upsample_bilinear_2x(x: Tensor) -> Tensor:
    """2x bilinear upsampling (align_corners disabled)."""
    _, _, h, w = x.shape
    uh = bilinear_matrix(h, x.dtype)
    uw = bilinear_matrix(w, x.dtype)
    out = np.matmul(np.matmul(uh, x.data), uw.T)

    def backward(g):
        return (np.matmul(uh.T, np.matmul(g, uw)),)

    return Tensor._from_op(out, (x,), backward, "upsample")


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean cross-entropy; class axis is 1, ``target`` holds class indices."""
    target = np.asarray(target)
    if logits.ndim < 2 or target.shape != logits.shape[:1] + logits.shape[2:]:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs target {target.shape}")
    if target.size and (target.min() < 0 or target.max() >= logits.shape[1]):
        raise DimensionError(f"cross_entropy: target labels outside 0..{logits.shape[1] - 1}")
    ld = logits.data
    shifted = ld - ld.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=1, keepdims=True)
    logp = shifted - np.log(z)
    picked = np.take_along_axis(logp, target[:, None].astype(np.int64), axis=1)
    count = target.size
    loss = np.asarray(-picked.sum() / count, dtype=logits.dtype)

    def backward(g):
        probs = e / z
        np.put_along_axis(probs, target[:, None].astype(np.int64),
                          np.take_along_axis(probs, target[:, None].astype(np.int64), axis=1) - 1.0, axis=1)
        return (probs * (g / count),)

    return Tensor._from_op(loss, (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

MAGIC = b"KVSEGTNS"
_DTYPE_TAGS = {np.dtype(np.float32): b"f32\x00", np.dtype(np.float64): b"f64\x00"}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}
FORMAT_VERSION = 1


def tensor_to_bytes(t: Tensor | np.ndarray) -> bytes:
    """Serialize as: 16-byte header, ndim + shape (u64 LE), raw LE IEEE-754 payload.

    Header = ``b"KVSEGTNS"`` + dtype tag (``b"f32\\0"`` / ``b"f64\\0"``) + u32 LE version.
    """
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.dtype not in _DTYPE_TAGS:
        arr = arr.astype(np.float64)
    buf = io.BytesIO()
    buf.write(MAGIC + _DTYPE_TAGS[arr.dtype] + struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<Q", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    return buf.getvalue()


def tensor_from_bytes(blob: bytes) -> Tensor:
    if len(blob) < 24 or blob[:8] != MAGIC:
        raise FormatError("not a serialized tensor (bad magic)")
    tag = blob[8:12]
    if tag not in _TAG_DTYPES:
        raise FormatError(f"unknown dtype tag {tag!r}")
    (version,) = struct.unpack("<I", blob[12:16])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported tensor format version {version}")
    (ndim,) = struct.unpack("<Q", blob[16:24])
    end = 24 + 8 * ndim
    shape = struct.unpack(f"<{ndim}Q", blob[24:end])
    dtype = _TAG_DTYPES[tag].newbyteorder("<")
    count = int(np.prod(shape)) if ndim else 1
    payload = blob[end:]
    if len(payload) != count * dtype.itemsize:
        raise FormatError(f"payload size {len(payload)} does not match shape {shape}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(_TAG_DTYPES[tag])
    return Tensor(arr, dtype=arr.dtype)


def save_tensor(t: Tensor, path) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
