"""Dual-path symmetry-aware mirror segmentation network.

An image and its horizontal flip go through one shared backbone. At the two
coarsest scales a symmetry-aware attention module (SAAM) lets both paths query
a fused representation; a contrast-and-fusion decoder (CFDM) then refines
predictions from the coarsest scale to the finest.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, MiniSwin, forward_pyramid
from .nn import (ECA, AttentionConfig, BatchNorm2d, Conv2d, ConvBNReLU, CrossAttention, FusionBlock,
                 Module, eca, fuse)
from .tensor import ContractError, DimensionError, Tensor

FLIP_MODES = ("raw-query", "aligned-query")
SAAM_SCALES = (2, 3)
DILATIONS = (8, 6, 4, 2)


@dataclass
class ModelConfig:
    input_size: int = 64
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    flip_mode: str = "raw-query"
    use_saam: bool = True
    attn_heads: int = 1
    eca_kernel: int = 3
    identity_attention: bool = False
    dilations: tuple[int, ...] = DILATIONS
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        self.dilations = tuple(self.dilations)
        if self.flip_mode not in FLIP_MODES:
            raise ValueError(f"flip_mode must be one of {FLIP_MODES}, got {self.flip_mode!r}")
        if len(self.dilations) != 4:
            raise ValueError("dilations need one entry per decoder layer")
        self.backbone.check_input(self.input_size, self.input_size)

    @classmethod
    def tiny(cls, **overrides) -> ModelConfig:
        """16x16 configuration used for end-to-end gradient checks."""
        kw: dict[str, Any] = dict(
            input_size=16,
            backbone=BackboneConfig(patch_size=2, embed_dim=4, depths=(1, 1, 1, 1), window_size=2,
                                    heads=(1, 1, 1, 1), mlp_ratio=2),
            dtype="float64",
        )
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["backbone"]["depths"] = list(self.backbone.depths)
        d["backbone"]["heads"] = list(self.backbone.heads)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ModelConfig:
        return cls(**d)


def to_tokens(x: Tensor) -> Tensor:
    """``B x c x h x w`` -> ``B x hw x c`` (row-major over h, w)."""
    B, c, h, w = x.shape
    return x.transpose(0, 2, 3, 1).reshape(B, h * w, c)


def from_tokens(t: Tensor, h: int, w: int) -> Tensor:
    B, _, c = t.shape
    return t.reshape(B, h, w, c).transpose(0, 3, 1, 2)


# ---------------------------------------------------------------------------
# SAAM
# ---------------------------------------------------------------------------

class SAAM(Module):
    def __init__(self, rng, channels: int, heads: int = 1, eca_kernel: int = 3, identity_init: bool = False):
        super().__init__()
        self.fuse = FusionBlock(rng, 2 * channels, channels)
        self.attn = CrossAttention(rng, AttentionConfig(channels, heads, identity_init))
        self.eca = ECA(rng, eca_kernel)


def saam(f: Tensor, f_flipped: Tensor, block: SAAM, flip_mode: str = "raw-query",
         return_weights: bool = False):
    """Symmetry-aware attention at one scale.

    ``f_flipped`` is the flipped path's feature in its own (mirrored)
    orientation. The fused key/value map ``F^c = fuse(F, flip(F^f))`` is in
    image orientation. In ``raw-query`` mode the flipped path queries with its
    mirrored feature and the second output stays mirrored; in
    ``aligned-query`` mode it is flipped back first, so both outputs are in
    image orientation.

    Returns ``(f_hat, f_hat_flipped)`` and, if requested, the two attention
    weight tensors ``B x heads x hw x hw``.
    """
    if f.shape != f_flipped.shape:
        raise DimensionError(f"saam: feature shapes {f.shape} and {f_flipped.shape} differ")
    if flip_mode not in FLIP_MODES:
        raise ValueError(f"unknown flip mode {flip_mode!r}")
    h, w = f.shape[2:]
    aligned = T.hflip(f_flipped)
    fc = fuse([f, aligned], block.fuse)
    query_f = aligned if flip_mode == "aligned-query" else f_flipped
    kv = to_tokens(fc)
    a, wa = block.attn(to_tokens(f), kv, return_weights=True)
    b, wb = block.attn(to_tokens(query_f), kv, return_weights=True)
    f_hat = eca(from_tokens(a, h, w), block.eca)
    f_hat_f = eca(from_tokens(b, h, w), block.eca)
    if return_weights:
        return f_hat, f_hat_f, wa, wb
    return f_hat, f_hat_f


# ---------------------------------------------------------------------------
# CCL / CFDM
# ---------------------------------------------------------------------------

class CCL(Module):
    """``relu(BN(local(x) - context(x)))`` with a dilated context branch."""

    def __init__(self, rng, channels: int, dilation: int):
        super().__init__()
        self.local = ConvBNReLU(rng, channels, channels, dilation=1)
        self.context = ConvBNReLU(rng, channels, channels, dilation=dilation)
        self.bn = BatchNorm2d(channels)

    def forward(self, x: Tensor) -> Tensor:
        return ccl(x, self)


def ccl(x: Tensor, block: CCL) -> Tensor:
    return T.relu(block.bn(block.local(x) - block.context(x)))


class CFDM(Module):
    def __init__(self, rng, index: int, channels: int, next_channels: int | None, dilation: int):
        super().__init__()
        if index < 3 and next_channels is None:
            raise ContractError(f"decoder layer {index} needs the coarser layer's width")
        if index == 3 and next_channels is not None:
            raise ContractError("the coarsest decoder layer has no upsampling branch")
        self.index = index
        self.channels = channels
        self.fuse_c = FusionBlock(rng, 2 * channels, channels)
        self.up = ConvBNReLU(rng, next_channels, channels) if next_channels is not None else None
        self.ccls = [CCL(rng, channels, dilation) for _ in range(3)]
        self.fuse_out = FusionBlock(rng, 3 * channels, channels)
        self.seg = Conv2d(rng, channels, 2, 1, std=0.01)


def cfdm(f: Tensor, f_flipped_aligned: Tensor, f_out_next: Tensor | None, block: CFDM):
    """One decoder layer; returns ``(F_out, P)``.

    ``f_flipped_aligned`` must already be in image orientation.
    """
    if f.shape != f_flipped_aligned.shape:
        raise DimensionError(f"cfdm: {f.shape} vs {f_flipped_aligned.shape}")
    if f.shape[1] != block.channels:
        raise DimensionError(f"cfdm layer {block.index}: expected {block.channels} channels, got {f.shape[1]}")
    fc = fuse([f, f_flipped_aligned], block.fuse_c)
    triplet = [fc, f, f_flipped_aligned]
    if block.up is not None:
        if f_out_next is None:
            raise ContractError(f"cfdm layer {block.index} needs the coarser output")
        d = T.bilinear_upsample2x(block.up(f_out_next))
        if d.shape != f.shape:
            raise DimensionError(f"cfdm layer {block.index}: upsampled branch {d.shape} != {f.shape}")
        triplet = [t + d for t in triplet]
    elif f_out_next is not None:
        raise ContractError("the coarsest decoder layer takes no coarser output")
    f_out = fuse([ccl(t, c) for t, c in zip(triplet, block.ccls)], block.fuse_out)
    return f_out, block.seg(f_out)


# ---------------------------------------------------------------------------
# full network
# ---------------------------------------------------------------------------

class SATNet(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        ch = cfg.backbone.channels
        self.backbone = MiniSwin(rng, cfg.backbone)
        self.saams = [SAAM(rng, ch[s], cfg.attn_heads, cfg.eca_kernel, cfg.identity_attention)
                      for s in SAAM_SCALES] if cfg.use_saam else []
        self.decoders = [CFDM(rng, i, ch[i], ch[i + 1] if i < 3 else None, cfg.dilations[i])
                         for i in range(4)]
        self.astype(np.dtype(cfg.dtype))

    def forward(self, image: Tensor) -> list[Tensor]:
        return satnet_forward(image, self)


def satnet_forward(image: Tensor, model: SATNet, capture: dict | None = None) -> list[Tensor]:
    """Predictions ``[P0, P1, P2, P3]`` (2-channel logits); P0 is the final map.

    If ``capture`` is a dict it receives the intermediate features (``F``,
    ``Ff`` in raw orientation, ``F_hat``, ``F_hat_f`` as produced by SAAM, and
    attention weights) keyed by name then scale.
    """
    cfg = model.cfg
    B = image.shape[0]
    both = forward_pyramid(T.concat([image, T.hflip(image)], axis=0), model.backbone)
    feats = [t[:B] for t in both]
    flipped = [t[B:] for t in both]
    aligned = [T.hflip(t) for t in flipped]
    if capture is not None:
        capture.update(F=dict(enumerate(feats)), Ff=dict(enumerate(flipped)),
                       F_hat={}, F_hat_f={}, attn={}, attn_f={})
    if cfg.use_saam:
        for s, block in zip(SAAM_SCALES, model.saams):
            fh, fhf, wa, wb = saam(feats[s], flipped[s], block, cfg.flip_mode, return_weights=True)
            if capture is not None:
                capture["F_hat"][s], capture["F_hat_f"][s] = fh, fhf
                capture["attn"][s], capture["attn_f"][s] = wa, wb
            feats[s] = fh
            aligned[s] = T.hflip(fhf) if cfg.flip_mode == "raw-query" else fhf
    preds: list[Tensor | None] = [None] * 4
    f_out = None
    for i in (3, 2, 1, 0):
        f_out, preds[i] = cfdm(feats[i], aligned[i], f_out, model.decoders[i])
    return preds


def dump_attention(model: SATNet, image: Tensor, scale: int, query_rect: tuple[int, int, int, int]):
    """Attention maps of both SAAM branches for a query region.

    ``query_rect`` is ``(y0, x0, y1, x1)`` in image-oriented feature
    coordinates (half-open). Returns ``(raw, normalized)``, each a pair of
    ``h x w`` maps ``(original-path, flipped-path)``: ``raw`` is the mean of
    the selected softmax rows (sums to 1), ``normalized`` is rescaled to
    [0, 1] by min-max scaling (a constant map becomes all ones).
    """
    if scale not in SAAM_SCALES:
        raise ValueError(f"attention maps exist only at scales {SAAM_SCALES}, got {scale}")
    if not model.cfg.use_saam:
        raise ValueError("model was built without SAAM")
    cap: dict = {}
    was_training = model.training
    model.eval()
    try:
        with T.no_grad():
            satnet_forward(image, model, capture=cap)
    finally:
        model.train(was_training)
    wa = cap["attn"][scale].data[0].mean(axis=0)
    wb = cap["attn_f"][scale].data[0].mean(axis=0)
    h, w = cap["F"][scale].shape[2:]
    y0, x0, y1, x1 = query_rect
    if not (0 <= y0 < y1 <= h and 0 <= x0 < x1 <= w):
        raise ValueError(f"query rect {query_rect} outside feature extent {h}x{w}")
    ys, xs = np.meshgrid(np.arange(y0, y1), np.arange(x0, x1), indexing="ij")
    rows = (ys * w + xs).reshape(-1)
    if model.cfg.flip_mode == "raw-query":
        rows_f = (ys * w + (w - 1 - xs)).reshape(-1)
    else:
        rows_f = rows
    raw = (wa[rows].mean(axis=0).reshape(h, w), wb[rows_f].mean(axis=0).reshape(h, w))
    normalized = tuple(_unit_peak(m) for m in raw)
    return raw, normalized


def _unit_peak(m: np.ndarray) -> np.ndarray:
    lo, hi = m.min(), m.max()
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.ones_like(m)
    return (m - lo) / (hi - lo)
