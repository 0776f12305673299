"""Miniature hierarchical window-attention backbone.

Four stages at strides ``patch, 2*patch, 4*patch, 8*patch`` (4/8/16/32 with
the default patch size) with channel widths ``C, 2C, 4C, 8C``. Internally the
stages work on channels-last maps ``B x H x W x C``; the pyramid is returned
channels-first.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, attention, param, trunc_normal
from .tensor import DimensionError, Tensor


@dataclass
class BackboneConfig:
    patch_size: int = 4
    embed_dim: int = 32
    depths: tuple[int, ...] = (1, 1, 2, 1)
    window_size: int = 4
    heads: tuple[int, ...] = (1, 2, 4, 8)
    mlp_ratio: int = 2

    def __post_init__(self):
        self.depths = tuple(self.depths)
        self.heads = tuple(self.heads)
        if len(self.depths) != 4 or len(self.heads) != 4:
            raise ValueError("depths and heads need one entry per stage (4)")
        for i, h in enumerate(self.heads):
            if (self.embed_dim << i) % h:
                raise ValueError(f"stage {i} width {self.embed_dim << i} not divisible by {h} heads")

    @property
    def channels(self) -> list[int]:
        return [self.embed_dim << i for i in range(4)]

    @property
    def min_divisor(self) -> int:
        return self.patch_size * 8

    def check_input(self, h: int, w: int) -> None:
        d = self.min_divisor
        if h % d or w % d:
            raise DimensionError(f"input {h}x{w} must be divisible by {d} (patch {self.patch_size} x 2^3)")


def relative_position_index(w: int) -> np.ndarray:
    coords = np.stack(np.meshgrid(np.arange(w), np.arange(w), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (w - 1)
    return rel[0] * (2 * w - 1) + rel[1]


def _region_labels(n: int, w: int, shift: int) -> np.ndarray:
    lab = np.zeros(n, dtype=np.int64)
    if shift:
        lab[n - w:n - shift] = 1
        lab[n - shift:] = 2
    return lab


@lru_cache(maxsize=64)
def window_mask(H: int, W: int, w: int, shift: int) -> np.ndarray | None:
    """Additive logit mask ``[nW, w*w, w*w]`` for a padded, optionally shifted map.

    ``H x W`` is the unpadded size; the map is zero-padded up to multiples of
    ``w``. Keys that are padding, or that share a shifted window with the
    query only through the cyclic wrap, get ``-inf``. Returns ``None`` when
    nothing needs masking.
    """
    Hp, Wp = -(-H // w) * w, -(-W // w) * w
    if Hp == H and Wp == W and not shift:
        return None
    rows = _region_labels(Hp, w, shift)
    cols = _region_labels(Wp, w, shift)
    region = rows[:, None] * 3 + cols[None, :]
    valid = np.zeros((Hp, Wp), dtype=bool)
    valid[:H, :W] = True
    if shift:
        valid = np.roll(valid, (-shift, -shift), (0, 1))
    nh, nw = Hp // w, Wp // w
    region = region.reshape(nh, w, nw, w).transpose(0, 2, 1, 3).reshape(nh * nw, w * w)
    valid = valid.reshape(nh, w, nw, w).transpose(0, 2, 1, 3).reshape(nh * nw, w * w)
    allowed = (region[:, :, None] == region[:, None, :]) & valid[:, None, :]
    # rows for padded queries may be fully blocked; they are cropped later
    allowed |= ~allowed.any(axis=2, keepdims=True)
    mask = np.where(allowed, 0.0, -np.inf)
    mask.setflags(write=False)
    return mask


def window_partition(x: Tensor, w: int) -> Tensor:
    B, H, W, C = x.shape
    x = x.reshape(B, H // w, w, W // w, w, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B * (H // w) * (W // w), w * w, C)


def window_reverse(x: Tensor, w: int, B: int, H: int, W: int) -> Tensor:
    C = x.shape[-1]
    x = x.reshape(B, H // w, W // w, w, w, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, H, W, C)


class WindowAttention(Module):
    def __init__(self, rng, dim: int, heads: int, window: int):
        super().__init__()
        self.dim, self.heads, self.window = dim, heads, window
        self.qkv = Linear(rng, dim, 3 * dim)
        self.proj = Linear(rng, dim, dim)
        self.rel_bias = param(trunc_normal(rng, ((2 * window - 1) ** 2, heads)))
        self._rel_index = relative_position_index(window)

    def forward(self, windows: Tensor, mask: np.ndarray | None = None) -> Tensor:
        nw_b, n, c = windows.shape
        qkv = self.qkv(windows)
        q, k, v = qkv[:, :, :c], qkv[:, :, c:2 * c], qkv[:, :, 2 * c:]
        bias = T.take_rows(self.rel_bias, self._rel_index)  # n x n x heads
        bias = bias.transpose(2, 0, 1)
        if mask is not None:
            n_win = mask.shape[0]
            bias = bias.reshape(1, self.heads, n, n) + mask.reshape(n_win, 1, n, n).astype(windows.dtype)
            q = q.reshape(nw_b // n_win, n_win, n, c)
            k = k.reshape(nw_b // n_win, n_win, n, c)
            v = v.reshape(nw_b // n_win, n_win, n, c)
        out = attention(q, k, v, self.heads, bias=bias)
        return self.proj(out.reshape(nw_b, n, c))


class SwinBlock(Module):
    """LN -> (shifted) window attention -> residual -> LN -> GELU MLP -> residual.

    ``shifted`` requests the cyclic shift; it only takes effect when the map
    spans more than one window.
    """

    def __init__(self, rng, dim: int, heads: int, window: int, shifted: bool, mlp_ratio: int):
        super().__init__()
        self.window = window
        self.shifted = shifted
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(rng, dim, heads, window)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(rng, dim, mlp_ratio * dim)
        self.fc2 = Linear(rng, mlp_ratio * dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        return window_attention_block(x, self, self.shifted)


def window_attention_block(x: Tensor, block: SwinBlock, shifted: bool = False) -> Tensor:
    """One transformer block over channels-last ``B x H x W x C`` tokens.

    Maps whose sides are not multiples of the window are zero-padded and the
    padded keys masked out.
    """
    B, H, W, C = x.shape
    w = block.window
    Hp, Wp = -(-H // w) * w, -(-W // w) * w
    shift = w // 2 if shifted and (Hp > w or Wp > w) else 0
    h = block.norm1(x)
    if Hp != H or Wp != W:
        h = T.pad(h, ((0, 0), (0, Hp - H), (0, Wp - W), (0, 0)))
    if shift:
        h = T.roll(h, (-shift, -shift), (1, 2))
    mask = window_mask(H, W, w, shift)
    win = block.attn(window_partition(h, w), mask)
    h = window_reverse(win, w, B, Hp, Wp)
    if shift:
        h = T.roll(h, (shift, shift), (1, 2))
    if Hp != H or Wp != W:
        h = h[:, :H, :W, :]
    x = x + h
    return x + block.fc2(T.gelu(block.fc1(block.norm2(x))))


class PatchEmbed(Module):
    def __init__(self, rng, patch: int, dim: int, in_channels: int = 3):
        super().__init__()
        self.patch = patch
        self.proj = Linear(rng, in_channels * patch * patch, dim)
        self.norm = LayerNorm(dim)

    def forward(self, image: Tensor) -> Tensor:
        return patch_embed(image, self)


def patch_embed(image: Tensor, block: PatchEmbed) -> Tensor:
    """Non-overlapping ``p x p`` patch projection + LN; returns ``B x H/p x W/p x C``."""
    B, Cin, H, W = image.shape
    p = block.patch
    if H % p or W % p:
        raise DimensionError(f"patch_embed: image {H}x{W} not divisible by patch {p}")
    x = image.reshape(B, Cin, H // p, p, W // p, p).transpose(0, 2, 4, 1, 3, 5)
    x = x.reshape(B, H // p, W // p, Cin * p * p)
    return block.norm(block.proj(x))


class PatchMerge(Module):
    def __init__(self, rng, dim: int):
        super().__init__()
        self.norm = LayerNorm(4 * dim)
        self.reduction = Linear(rng, 4 * dim, 2 * dim, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        return patch_merge(x, self)


def patch_merge(x: Tensor, block: PatchMerge) -> Tensor:
    """2x2 neighbourhood concat (4c) -> LN -> linear to 2c, channels-last."""
    B, H, W, C = x.shape
    if H % 2 or W % 2:
        raise DimensionError(f"patch_merge: odd feature map {H}x{W}")
    x = x.reshape(B, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 4, 2, 5)
    x = x.reshape(B, H // 2, W // 2, 4 * C)
    return block.reduction(block.norm(x))


class MiniSwin(Module):
    def __init__(self, rng: np.random.Generator, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        dims = cfg.channels
        self.embed = PatchEmbed(rng, cfg.patch_size, dims[0])
        self.merges = [PatchMerge(rng, dims[i - 1]) for i in range(1, 4)]
        self.blocks = [SwinBlock(rng, dims[i], cfg.heads[i], cfg.window_size,
                                 shifted=j % 2 == 1, mlp_ratio=cfg.mlp_ratio)
                       for i in range(4) for j in range(cfg.depths[i])]
        self.out_norms = [LayerNorm(d) for d in dims]

    def stage_blocks(self, i: int) -> list[SwinBlock]:
        start = sum(self.cfg.depths[:i])
        return self.blocks[start:start + self.cfg.depths[i]]

    def forward(self, image: Tensor) -> list[Tensor]:
        return forward_pyramid(image, self)


def forward_pyramid(image: Tensor, net: MiniSwin) -> list[Tensor]:
    """Run the backbone; returns ``[F0, F1, F2, F3]`` as ``B x c x h x w``."""
    if image.ndim != 4 or image.shape[1] != 3:
        raise DimensionError(f"backbone expects B x 3 x H x W, got {image.shape}")
    net.cfg.check_input(*image.shape[2:])
    x = net.embed(image)
    feats = []
    for i in range(4):
        if i > 0:
            x = net.merges[i - 1](x)
        for blk in net.stage_blocks(i):
            x = blk(x)
        feats.append(net.out_norms[i](x).transpose(0, 3, 1, 2))
    return feats
