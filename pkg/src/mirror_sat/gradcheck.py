"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor, _topological, kink_probe


def _rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))


def gradcheck(f: Callable[..., Tensor], x: Tensor | Sequence[Tensor], eps: float = 1e-5,
              coords: int | None = None, rng: np.random.Generator | None = None,
              skip_kinks: bool = True) -> float:
    """Max relative error between the analytic gradient of ``f`` and central differences.

    ``f`` is called with no arguments and must read the current values of the
    leaf tensors ``x`` (which are perturbed in place). The relative error per
    coordinate is ``|a - n| / max(1, |a|, |n|)``.

    Args:
        f: scalar-valued closure.
        x: leaf tensor or tensors to differentiate with respect to.
        eps: finite-difference step.
        coords: if given, check at most this many randomly chosen coordinates
            per tensor instead of all of them.
        rng: generator used to pick coordinates.
        skip_kinks: drop coordinates where a relu changes its active set
            between the two perturbed evaluations.
    """
    leaves = [x] if isinstance(x, Tensor) else list(x)
    for t in leaves:
        if t.dtype != np.float64:
            raise TypeError(f"gradcheck needs float64 tensors, got {t.dtype}")
        t.requires_grad = True
        t.grad = None
    out = f()
    if out.size != 1:
        raise ValueError(f"gradcheck: f must be scalar, got shape {out.shape}")
    _require_finite(out)
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in leaves]
    rng = rng or np.random.default_rng(0)

    worst = 0.0
    for t, a in zip(leaves, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if coords is not None and flat.size > coords:
            idx = rng.choice(flat.size, size=coords, replace=False)
        ga = a.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            with kink_probe() as plus_pattern:
                fp = f()
            flat[i] = orig - eps
            with kink_probe() as minus_pattern:
                fm = f()
            flat[i] = orig
            _require_finite(fp)
            _require_finite(fm)
            if skip_kinks and not _same_pattern(plus_pattern, minus_pattern):
                continue
            numeric = (float(fp.data) - float(fm.data)) / (2.0 * eps)
            worst = max(worst, _rel_err(float(ga[i]), numeric))
    return worst


def _same_pattern(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(p, q) for p, q in zip(a, b))


def _require_finite(t: Tensor) -> None:
    if np.all(np.isfinite(t.data)):
        return
    # report the earliest recorded op whose output went non-finite
    for node in _topological(t):
        if not np.all(np.isfinite(node.data)):
            raise NonFiniteError(f"gradcheck: non-finite values first produced by op '{node.op}'")
    raise NonFiniteError(f"gradcheck: non-finite output from op '{t.op}'")


# ---------------------------------------------------------------------------
# the standard suite
# ---------------------------------------------------------------------------

def _away_from_zero(rng, shape, margin=1e-3):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def _weighted(out: Tensor, rng) -> Tensor:
    """Contract a tensor with a fixed random weight to get a scalar."""
    from . import tensor as T

    w = rng.standard_normal(out.shape)
    return T.tsum(T.mul(out, w))


def op_cases(seed: int = 0):
    """Yield ``(name, closure, leaves)`` for every differentiable op and block."""
    from . import tensor as T
    from .backbone import PatchEmbed, PatchMerge, SwinBlock, patch_embed, patch_merge, window_attention_block
    from .model import CCL, CFDM, SAAM, ccl, cfdm, saam
    from .nn import ECA, FusionBlock, attention, eca, fuse

    rng = np.random.default_rng(seed)

    def leaf(*shape, away=False):
        data = _away_from_zero(rng, shape) if away else rng.standard_normal(shape)
        return Tensor(data, requires_grad=True)

    def case(name, build, leaves):
        w_rng = np.random.default_rng(seed + 1)
        probe = build()
        w = w_rng.standard_normal(probe.shape)
        return name, (lambda: T.tsum(T.mul(build(), w))), leaves

    a, b = leaf(3, 4), leaf(4, 5)
    yield case("matmul", lambda: T.matmul(a, b), [a, b])
    x, k, bias = leaf(2, 3, 6, 6), leaf(4, 3, 3, 3), leaf(4)
    yield case("conv2d", lambda: T.conv2d(x, k, bias, 1, 1, 1), [x, k, bias])
    yield case("conv2d_dilated", lambda: T.conv2d(x, k, bias, 1, 2, 2), [x, k, bias])
    yield case("conv2d_strided", lambda: T.conv2d(x, k, bias, 2, 1, 1), [x, k, bias])
    k1 = leaf(4, 3, 1, 1)
    yield case("conv2d_1x1", lambda: T.conv2d(x, k1, bias), [x, k1, bias])
    g, be = leaf(3), leaf(3)
    rm, rv = np.zeros(3), np.ones(3)
    yield case("batchnorm_train", lambda: T.batchnorm(x, g, be, rm.copy(), rv.copy(), True), [x, g, be])
    rm2, rv2 = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
    yield case("batchnorm_eval", lambda: T.batchnorm(x, g, be, rm2, rv2, False), [x, g, be])
    r = leaf(3, 5, away=True)
    yield case("relu", lambda: T.relu(r), [r])
    s = leaf(3, 5)
    yield case("softmax_rows", lambda: T.softmax_rows(s), [s])
    yield case("sigmoid", lambda: T.sigmoid(s), [s])
    yield case("gelu", lambda: T.gelu(s), [s])
    s2 = leaf(1, 5)
    yield case("add_broadcast", lambda: T.add(s, s2), [s, s2])
    c1, c2 = leaf(2, 2, 3, 3), leaf(2, 3, 3, 3)
    yield case("concat_channels", lambda: T.concat_channels([c1, c2]), [c1, c2])
    yield case("hflip", lambda: T.hflip(c1), [c1])
    yield case("bilinear_upsample2x", lambda: T.bilinear_upsample2x(c1), [c1])
    yield case("resize_bilinear", lambda: T.resize_bilinear(c1, 7, 5), [c1])
    lg, lb = leaf(5), leaf(5)
    ln_x = leaf(2, 3, 5)
    yield case("layernorm", lambda: T.layernorm(ln_x, lg, lb), [ln_x, lg, lb])
    y1, kk = leaf(2, 6), leaf(3)
    yield case("conv1d_channels", lambda: T.conv1d_channels(y1, kk), [y1, kk])
    q, kt, v = leaf(2, 4, 6), leaf(2, 5, 6), leaf(2, 5, 6)
    yield case("attention", lambda: attention(q, kt, v, heads=2), [q, kt, v])

    def block_case(name, block, build, inputs):
        block.astype(np.float64)
        return case(name, build, list(inputs) + block.parameters())

    brng = np.random.default_rng(seed + 2)
    fb = FusionBlock(brng, 5, 3)
    yield block_case("fuse", fb, lambda: fuse([c1, c2], fb), [c1, c2])
    e = ECA(brng, 3)
    ex = leaf(2, 5, 3, 3)
    yield block_case("eca", e, lambda: eca(ex, e), [ex])
    img = leaf(2, 3, 8, 8)
    pe = PatchEmbed(brng, 4, 6)
    yield block_case("patch_embed", pe, lambda: patch_embed(img, pe), [img])
    tok = leaf(2, 4, 4, 6)
    pm = PatchMerge(brng, 6)
    yield block_case("patch_merge", pm, lambda: patch_merge(tok, pm), [tok])
    sb = SwinBlock(brng, 6, 2, 2, shifted=True, mlp_ratio=2)
    yield block_case("window_attention_block", sb, lambda: window_attention_block(tok, sb, True), [tok])
    tok3 = leaf(2, 3, 3, 6)
    yield block_case("window_attention_block_padded", sb, lambda: window_attention_block(tok3, sb, True), [tok3])
    cc = CCL(brng, 3, 2)
    cx = leaf(2, 3, 4, 4)
    yield block_case("ccl", cc, lambda: ccl(cx, cc), [cx])
    cf = CFDM(brng, 1, 3, 6, 2)
    f, ff, nxt = leaf(2, 3, 4, 4), leaf(2, 3, 4, 4), leaf(2, 6, 2, 2)
    yield block_case("cfdm", cf, lambda: cfdm(f, ff, nxt, cf)[1], [f, ff, nxt])
    sa = SAAM(brng, 4)
    sf, sff = leaf(2, 4, 3, 3), leaf(2, 4, 3, 3)
    yield block_case("saam", sa, lambda: T.concat(list(saam(sf, sff, sa)), axis=1), [sf, sff])
    logits = leaf(2, 2, 4, 4)
    mask = (rng.random((2, 4, 4)) > 0.5).astype(np.float64)
    yield "bce", (lambda: T.bce_two_channel(logits, mask)), [logits]


def end_to_end_case(seed: int = 0):
    """Tiny SATNet (16x16 input) total loss as a function of every parameter."""
    from . import tensor as T
    from .model import ModelConfig, SATNet
    from .train import total_loss

    rng = np.random.default_rng(seed)
    model = SATNet(ModelConfig.tiny(seed=seed))
    x = Tensor(rng.random((2, 3, 16, 16)))
    mask = (rng.random((2, 16, 16)) > 0.5).astype(np.float64)
    return (lambda: total_loss(model(x), mask)[0]), model.parameters()


def run_suite(tolerance: float = 1e-6, e2e_tolerance: float = 1e-3, seed: int = 0,
              e2e_coords: int = 2, eps: float = 1e-5):
    """Returns rows ``(name, max_error, tolerance, passed)``; the last row is end-to-end."""
    rows = []
    for name, f, leaves in op_cases(seed):
        err = gradcheck(f, leaves, eps=eps, rng=np.random.default_rng(seed))
        rows.append((name, err, tolerance, err < tolerance))
    f, leaves = end_to_end_case(seed)
    err = gradcheck(f, leaves, eps=eps, coords=e2e_coords, rng=np.random.default_rng(seed))
    rows.append(("satnet_end_to_end", err, e2e_tolerance, err < e2e_tolerance))
    return rows
