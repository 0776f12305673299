"""Dense tensors with reverse-mode automatic differentiation.

Every op takes and returns :class:`Tensor` objects. While recording is
enabled, each result keeps references to its inputs plus a closure that maps
the output gradient to input gradients; :meth:`Tensor.backward` walks that
record in reverse topological order.

Layout convention for image-like data is ``B x C x H x W``.
"""
from __future__ import annotations

import contextlib
import itertools
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_grad_enabled = True
_node_counter = itertools.count()
# relu sign patterns, collected while a kink probe is active
_kink_probe: list[np.ndarray] | None = None


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when an op is called outside its preconditions."""


class NonFiniteError(FloatingPointError):
    """Raised by checks that find NaN/Inf; names the offending op."""


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def kink_probe():
    """Collect relu activation patterns produced inside the block."""
    global _kink_probe
    prev, _kink_probe = _kink_probe, []
    try:
        yield _kink_probe
    finally:
        _kink_probe = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "op", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, op: str = "leaf"):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_counter)
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- basic properties -------------------------------------------------
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
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every recorded ancestor of this tensor."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            node.grad = g
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topological(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data, op=op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name}: cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        return _result(a.data * c, (a,), lambda g: (_unbroadcast(g * c, a.shape),), "mul")
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batch axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(ad @ bd, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing only."""
    src, dt = x.shape, x.dtype

    def backward(g):
        out = np.zeros(src, dtype=dt)
        out[idx] = g
        return (out,)

    return _result(np.array(x.data[idx]), (x,), backward, "getitem")


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """``table[index]`` for an integer index array; gradients scatter-add."""
    src, dt = table.shape, table.dtype
    flat = index.reshape(-1)

    def backward(g):
        out = np.zeros(src, dtype=dt)
        np.add.at(out, flat, g.reshape((flat.size,) + src[1:]))
        return (out,)

    return _result(table.data[index], (table,), backward, "take_rows")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise DimensionError("concat of an empty list")
    ref = tensors[0].shape
    nd = len(ref)
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise DimensionError(
                f"concat: shapes {[tuple(t.shape) for t in tensors]} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward, "concat")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=1)


def pad(x: Tensor, widths) -> Tensor:
    """Zero padding; ``widths`` as for :func:`numpy.pad`."""
    widths = tuple(tuple(w) for w in widths)
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))
    return _result(np.pad(x.data, widths), (x,), lambda g: (np.ascontiguousarray(g[crop]),), "pad")


def hflip(x: Tensor) -> Tensor:
    """Reverse the width (last) axis."""
    return _result(np.ascontiguousarray(x.data[..., ::-1]), (x,),
                   lambda g: (np.ascontiguousarray(g[..., ::-1]),), "hflip")


def roll(x: Tensor, shift, axis) -> Tensor:
    neg = tuple(-s for s in shift) if isinstance(shift, (tuple, list)) else -shift
    return _result(np.roll(x.data, shift, axis), (x,), lambda g: (np.roll(g, neg, axis),), "roll")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    src = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _kink_probe is not None:
        _kink_probe.append(mask)
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _SQRT_HALF))

    def backward(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (cdf + xd * pdf),)

    return _result(xd * cdf, (x,), backward, "gelu")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis. Rows may carry ``-inf`` entries."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), backward, "softmax")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, dilation: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is ``B x C x H x W``, ``kernel`` is ``O x C x k x k`` with ``k`` in
    {1, 3}. The sliding window is unfolded into a matrix so both passes are a
    single GEMM plus ``k*k`` strided copies.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {kernel.shape}")
    B, C, H, W = x.shape
    O, Ck, k, k2 = kernel.shape
    if Ck != C:
        raise DimensionError(f"conv2d: input has {C} channels but kernel {kernel.shape} expects {Ck}")
    if k != k2 or k not in (1, 3):
        raise DimensionError(f"conv2d: kernel spatial size must be 1x1 or 3x3, got {k}x{k2}")
    if bias is not None and bias.shape != (O,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} does not match {O} output channels")
    Ho = conv_output_size(H, k, stride, dilation, padding)
    Wo = conv_output_size(W, k, stride, dilation, padding)
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"conv2d: input {x.shape} too small for this kernel")
    xd, wd = x.data, kernel.data
    wmat = wd.reshape(O, C * k * k)

    if k == 1 and padding == 0:
        xs = xd[:, :, ::stride, ::stride] if stride > 1 else xd
        cols = xs.transpose(0, 2, 3, 1).reshape(-1, C)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        span = dilation * (k - 1) + 1
        win = sliding_window_view(xp, (span, span), axis=(2, 3))
        win = win[:, :, ::stride, ::stride, ::dilation, ::dilation][:, :, :Ho, :Wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(-1, C * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gx = gw = gb = None
        if kernel.requires_grad:
            gw = (gmat.T @ cols).reshape(wd.shape)
        if bias is not None and bias.requires_grad:
            gb = gmat.sum(axis=0)
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(B, Ho, Wo, C, k, k)
            if k == 1 and padding == 0:
                g1 = gcols[..., 0, 0].transpose(0, 3, 1, 2)
                if stride > 1:
                    gx = np.zeros(xd.shape, dtype=xd.dtype)
                    gx[:, :, ::stride, ::stride] = g1
                else:
                    gx = np.ascontiguousarray(g1)
            else:
                gxp = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=xd.dtype)
                hi = stride * (Ho - 1) + 1
                wi = stride * (Wo - 1) + 1
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i * dilation:i * dilation + hi:stride,
                            j * dilation:j * dilation + wi:stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        return gx, gw, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, parents, backward, "conv2d")


def conv1d_channels(y: Tensor, kernel: Tensor) -> Tensor:
    """1-D correlation along the channel axis of a ``B x C`` map, zero padded."""
    if y.ndim != 2 or kernel.ndim != 1:
        raise DimensionError(f"conv1d_channels: expected B x C and a 1-D kernel, got {y.shape}, {kernel.shape}")
    k = kernel.shape[0]
    if k % 2 == 0:
        raise DimensionError(f"conv1d_channels: kernel length must be odd, got {k}")
    B, C = y.shape
    pad = k // 2
    yp = np.pad(y.data, ((0, 0), (pad, pad)))
    taps = sliding_window_view(yp, k, axis=1)  # B x C x k
    wd = kernel.data

    def backward(g):
        gy = gw = None
        if kernel.requires_grad:
            gw = np.einsum("bc,bcj->j", g, taps)
        if y.requires_grad:
            gyp = np.zeros_like(yp)
            for j in range(k):
                gyp[:, j:j + C] += wd[j] * g
            gy = gyp[:, pad:pad + C]
        return gy, gw

    return _result(taps @ wd, (y, kernel), backward, "conv1d_channels")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool, momentum: float = 0.1,
              eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over ``B x C x H x W``.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, exponential moving average).
    """
    if x.ndim != 4 or x.shape[1] < 1:
        raise DimensionError(f"batchnorm: expected B x C x H x W, got {x.shape}")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batchnorm: params {gamma.shape}/{beta.shape} for {C} channels")
    xd = x.data
    g4 = gamma.data.reshape(1, C, 1, 1)
    if training:
        n = B * H * W
        if n <= 1:
            raise ContractError(
                f"batchnorm: training mode needs more than one value per channel, got input {x.shape}")
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(C)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(C) * (n / (n - 1))

        def backward(g):
            gg = gb = gx = None
            if gamma.requires_grad:
                gg = (g * xhat).sum(axis=(0, 2, 3))
            if beta.requires_grad:
                gb = g.sum(axis=(0, 2, 3))
            if x.requires_grad:
                dxhat = g * g4
                gx = inv * (dxhat - dxhat.mean(axis=(0, 2, 3), keepdims=True)
                            - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))
            return gx, gg, gb
    else:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(xd.dtype).reshape(1, C, 1, 1)
        xhat = (xd - running_mean.astype(xd.dtype).reshape(1, C, 1, 1)) * inv

        def backward(g):
            gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
            gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
            gx = g * g4 * inv if x.requires_grad else None
            return gx, gg, gb

    out = xhat * g4 + beta.data.reshape(1, C, 1, 1)
    return _result(out, (x, gamma, beta), backward, "batchnorm")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis."""
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise DimensionError(f"layernorm: params {gamma.shape}/{beta.shape} for last axis {D}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def backward(g):
        red = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gb = g.sum(axis=red) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _result(xhat * gd + beta.data, (x, gamma, beta), backward, "layernorm")


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

@lru_cache(maxsize=256)
def _interp_matrix(n_in: int, n_out: int, dtype_name: str) -> np.ndarray:
    """Row-stochastic linear interpolation matrix, pixel-center sampling."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    m.setflags(write=False)
    return m.astype(dtype_name)


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    return _interp_matrix(n_in, n_out, np.dtype(dtype).name)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the two trailing axes (align-corners off)."""
    H, W = x.shape[-2:]
    mh = interp_matrix(H, out_h, x.dtype)
    mw = interp_matrix(W, out_w, x.dtype)
    out = mh @ (x.data @ mw.T)
    return _result(out, (x,), lambda g: (mh.T @ (g @ mw),), "resize_bilinear")


def bilinear_upsample2x(x: Tensor) -> Tensor:
    H, W = x.shape[-2:]
    return resize_bilinear(x, 2 * H, 2 * W)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def bce_two_channel(logits: Tensor, mask: np.ndarray, eps: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy of a 2-channel logit map against a binary mask.

    The mirror probability is the channel softmax's channel 1, i.e.
    ``sigmoid(z1 - z0)``; it is clamped to ``[eps, 1 - eps]`` before the log.
    """
    if logits.ndim != 4 or logits.shape[1] != 2:
        raise DimensionError(f"bce: expected B x 2 x H x W logits, got {logits.shape}")
    B, _, H, W = logits.shape
    m = np.asarray(mask)
    if m.ndim == 4:
        m = m[:, 0]
    if m.shape != (B, H, W):
        raise DimensionError(f"bce: mask shape {mask.shape} does not match logits {logits.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("bce: mask must contain only 0 and 1")
    m = m.astype(logits.dtype)
    d = logits.data[:, 1] - logits.data[:, 0]
    q = 0.5 * (1.0 + np.tanh(0.5 * d))
    qc = np.clip(q, eps, 1.0 - eps)
    n = m.size
    loss = -(m * np.log(qc) + (1.0 - m) * np.log(1.0 - qc)).sum() / n
    live = (q > eps) & (q < 1.0 - eps)

    def backward(g):
        gd = g * (q - m) * live / n
        out = np.empty(logits.shape, dtype=logits.dtype)
        out[:, 1] = gd
        out[:, 0] = -gd
        return (out,)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "bce")


def mirror_probability(logits: np.ndarray) -> np.ndarray:
    """Channel-softmax probability of channel 1 for ``B x 2 x H x W`` logits."""
    d = logits[:, 1] - logits[:, 0]
    return 0.5 * (1.0 + np.tanh(0.5 * d))


def check_finite(t: Tensor, name: str) -> None:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"non-finite values produced by {name} ({t.op})")


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in params)
