"""Parameter containers, basic layers, and the reusable blocks of the network.

The blocks here are the fusion function (1x1 conv, 3x3 conv, BN, ReLU over a
channel concatenation), scaled dot-product attention, and efficient channel
attention (ECA).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


def param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=data.dtype)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class Module:
    """Minimal parameter container.

    Parameters are :class:`Tensor` attributes with ``requires_grad``; buffers
    are numpy arrays registered in ``self._buffers``. Submodules are found in
    attributes and in lists of modules.
    """

    training = True

    def __init__(self):
        self._buffers: dict[str, np.ndarray] = {}

    def children(self) -> Iterator[tuple[str, Module]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, buf in self._buffers.items():
            yield prefix + name, buf
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        extra = set(state) - set(own) - set(bufs)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)
        for name, b in bufs.items():
            b[...] = state[name]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> Module:
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> Module:
        return self.train(False)

    def astype(self, dtype) -> Module:
        """Cast parameters and buffers in place."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        self._cast_buffers(dtype)
        return self

    def _cast_buffers(self, dtype) -> None:
        for key in self._buffers:
            self._buffers[key] = self._buffers[key].astype(dtype)
        for _, child in self.children():
            child._cast_buffers(dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """Token-wise affine map over the last axis."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.weight = param(trunc_normal(rng, (d_in, d_out)))
        self.bias = param(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gamma, self.beta)


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, k: int,
                 dilation: int = 1, bias: bool = True, std: float | None = None):
        super().__init__()
        # He init (fan-out) unless a std is forced
        std = np.sqrt(2.0 / (c_out * k * k)) if std is None else std
        self.weight = param(rng.standard_normal((c_out, c_in, k, k)) * std)
        self.bias = param(np.zeros(c_out)) if bias else None
        self.k = k
        self.dilation = dilation

    def forward(self, x: Tensor) -> Tensor:
        pad = self.dilation * (self.k // 2)
        return T.conv2d(x, self.weight, self.bias, stride=1, dilation=self.dilation, padding=pad)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = param(np.ones(channels))
        self.beta = param(np.zeros(channels))
        self._buffers["running_mean"] = np.zeros(channels)
        self._buffers["running_var"] = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm(x, self.gamma, self.beta, self._buffers["running_mean"],
                           self._buffers["running_var"], self.training, self.momentum, self.eps)


class ConvBNReLU(Module):
    """3x3 conv -> BN -> ReLU, padding chosen to preserve H x W."""

    def __init__(self, rng, c_in: int, c_out: int, dilation: int = 1):
        super().__init__()
        self.conv = Conv2d(rng, c_in, c_out, 3, dilation=dilation)
        self.bn = BatchNorm2d(c_out)

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.bn(self.conv(x)))


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------

class FusionBlock(Module):
    """``relu(BN(conv3x3(conv1x1(concat(inputs)))))``."""

    def __init__(self, rng, in_channels: int, out_channels: int):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.reduce = Conv2d(rng, in_channels, out_channels, 1)
        self.conv = Conv2d(rng, out_channels, out_channels, 3)
        self.bn = BatchNorm2d(out_channels)

    def forward(self, inputs: Sequence[Tensor]) -> Tensor:
        return fuse(inputs, self)


def fuse(inputs: Sequence[Tensor], block: FusionBlock) -> Tensor:
    if len(inputs) < 2:
        raise ValueError(f"fuse needs at least two inputs, got {len(inputs)}")
    ref = inputs[0].shape
    for t in inputs:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise DimensionError(f"fuse: inputs {[tuple(t.shape) for t in inputs]} disagree on B, H, W")
    total = sum(t.shape[1] for t in inputs)
    if total != block.in_channels:
        raise DimensionError(f"fuse: inputs carry {total} channels, block expects {block.in_channels}")
    x = T.concat_channels(inputs)
    return T.relu(block.bn(block.conv(block.reduce(x))))


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def attention(q: Tensor, k: Tensor, v: Tensor, heads: int = 1, bias: Tensor | np.ndarray | None = None,
              return_weights: bool = False):
    """``softmax(q k^T / sqrt(d_k)) v`` over token matrices ``[..., N, d]``.

    With ``heads > 1`` the feature axis is split evenly and head outputs are
    concatenated. ``bias`` is added to the logits (broadcast against
    ``[..., heads, N_q, N_k]``).
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-1] != v.shape[-1]:
        raise DimensionError(f"attention: token dims differ: q {q.shape}, k {k.shape}, v {v.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention: {k.shape[-2]} keys but {v.shape[-2]} values")
    d = q.shape[-1]
    if d % heads:
        raise DimensionError(f"attention: dim {d} not divisible by {heads} heads")
    dh = d // heads
    lead = q.shape[:-2]

    def split(t: Tensor) -> Tensor:
        n = t.shape[-2]
        t = t.reshape(t.shape[:-2] + (n, heads, dh))
        nd = t.ndim
        return t.transpose(tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))

    qh, kh, vh = split(q), split(k), split(v)
    nd = kh.ndim
    kt = kh.transpose(tuple(range(nd - 2)) + (nd - 1, nd - 2))
    logits = (qh @ kt) * (1.0 / np.sqrt(dh))
    if bias is not None:
        logits = logits + bias
    weights = T.softmax_rows(logits)
    out = weights @ vh
    nd = out.ndim
    out = out.transpose(tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    out = out.reshape(lead + (q.shape[-2], d))
    if return_weights:
        return out, weights
    return out


@dataclass
class AttentionConfig:
    dim: int
    heads: int = 1
    identity_init: bool = False

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by {self.heads} heads")


class CrossAttention(Module):
    """Learned token projections around :func:`attention`."""

    def __init__(self, rng, cfg: AttentionConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim
        self.q = Linear(rng, d, d)
        self.k = Linear(rng, d, d)
        self.v = Linear(rng, d, d)
        self.out = Linear(rng, d, d)
        if cfg.identity_init:
            for lin in (self.q, self.k, self.v, self.out):
                lin.weight.data = np.eye(d)

    def forward(self, query: Tensor, source: Tensor, return_weights: bool = False):
        res = attention(self.q(query), self.k(source), self.v(source), self.cfg.heads,
                        return_weights=return_weights)
        if return_weights:
            out, w = res
            return self.out(out), w
        return self.out(res)


# ---------------------------------------------------------------------------
# efficient channel attention
# ---------------------------------------------------------------------------

class ECA(Module):
    def __init__(self, rng, k: int = 3):
        super().__init__()
        if k < 3 or k % 2 == 0:
            raise ValueError(f"ECA kernel length must be odd and >= 3, got {k}")
        self.k = k
        bound = 1.0 / np.sqrt(k)
        self.weight = param(rng.uniform(-bound, bound, size=k))

    def forward(self, x: Tensor) -> Tensor:
        return eca(x, self)


def eca(x: Tensor, block: ECA) -> Tensor:
    """Pool, 1-D conv across channels, sigmoid gate, rescale."""
    if x.ndim != 4:
        raise DimensionError(f"eca: expected B x C x H x W, got {x.shape}")
    B, C = x.shape[:2]
    if C < block.k:
        raise DimensionError(f"eca: {C} channels is fewer than kernel length {block.k}")
    pooled = x.mean(axis=(2, 3))
    gate = T.sigmoid(T.conv1d_channels(pooled, block.weight))
    return x * gate.reshape(B, C, 1, 1)
