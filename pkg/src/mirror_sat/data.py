"""Procedural mirror scenes with exact ground truth.

Each scene is a textured background with a few primitives. A rectangular
mirror shows the horizontally reflected (and dimmed) content of an equally
sized source region directly beside it, so the mask is exact by construction.
Some scenes also carry an unflipped copy of another region as a distractor.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import netpbm

# independent RNG streams per (seed, index, field)
_LAYOUT, _BACKGROUND, _NOISE = 0, 1, 2


def _stream(seed: int, index: int, which: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index, which])))


@dataclass
class GeneratorConfig:
    size: int = 64
    min_area: float = 0.05
    max_area: float = 0.4
    distractor_fraction: float = 0.25
    dim_range: tuple[float, float] = (0.6, 0.95)
    noise_std: float = 0.02
    objects: tuple[int, int] = (3, 6)
    val_fraction: float = 0.0

    def __post_init__(self):
        self.dim_range = tuple(self.dim_range)
        self.objects = tuple(self.objects)
        if self.min_area > self.max_area:
            raise ValueError(f"min_area {self.min_area} exceeds max_area {self.max_area}")
        if not 0 < self.max_area <= 0.5:
            raise ValueError("max_area must lie in (0, 0.5]: the source region sits beside the mirror")
        if self.size < 16:
            raise ValueError(f"canvas size {self.size} too small")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")


@dataclass
class Primitive:
    kind: str  # rect | ellipse | stripes
    y0: int
    x0: int
    y1: int
    x1: int
    color: tuple[int, int, int]
    period: int = 0


@dataclass
class SceneSpec:
    size: int
    background_seed: int
    background: tuple[tuple[int, int, int], tuple[int, int, int], int]
    objects: list[Primitive]
    mirror: tuple[int, int, int, int]  # y0, x0, y1, x1 (half-open)
    source_offset: int  # source x0 minus mirror x0 (+-width)
    dimming: float
    noise_std: float
    noise_seed: int
    distractor: tuple[int, int, int, int, int, int] | None = None  # sy, sx, dy, dx, h, w

    @property
    def source(self) -> tuple[int, int, int, int]:
        y0, x0, y1, x1 = self.mirror
        return y0, x0 + self.source_offset, y1, x1 + self.source_offset


@dataclass
class MirrorSample:
    image: np.ndarray  # H x W x 3 in [0, 1]
    mask: np.ndarray  # H x W, uint8 0/1
    spec: SceneSpec | None
    split: str = "train"
    index: int = 0
    seed: int = 0
    name: str = field(default="")

    def __post_init__(self):
        if not self.name:
            self.name = f"{self.index:05d}"


def _color(rng) -> tuple[int, int, int]:
    return tuple(int(c) for c in rng.integers(0, 256, size=3))


def sample_spec(seed: int, index: int, cfg: GeneratorConfig) -> SceneSpec:
    rng = _stream(seed, index, _LAYOUT)
    S = cfg.size
    total = S * S
    lo, hi = int(np.ceil(cfg.min_area * total)), int(np.floor(cfg.max_area * total))
    for _ in range(10000):
        w = int(rng.integers(4, S // 2 + 1))
        h = int(rng.integers(4, S + 1))
        if lo <= w * h <= hi:
            break
    else:
        raise ValueError(f"could not place a mirror with area in [{cfg.min_area}, {cfg.max_area}]")
    source_left = bool(rng.integers(0, 2))
    if source_left:
        x0 = int(rng.integers(w, S - w + 1))
        offset = -w
    else:
        x0 = int(rng.integers(0, S - 2 * w + 1))
        offset = w
    y0 = int(rng.integers(0, S - h + 1))
    mirror = (y0, x0, y0 + h, x0 + w)

    objects = []
    n_obj = int(rng.integers(cfg.objects[0], cfg.objects[1] + 1))
    sy0, sx0 = y0, x0 + offset
    for k in range(n_obj):
        kind = ("rect", "ellipse", "stripes")[int(rng.integers(0, 3))]
        if k == 0:
            # the reflected region always holds at least one object
            oh = int(rng.integers(max(2, h // 3), h + 1))
            ow = int(rng.integers(max(2, w // 3), w + 1))
            oy = sy0 + int(rng.integers(0, h - oh + 1))
            ox = sx0 + int(rng.integers(0, w - ow + 1))
        else:
            oh = int(rng.integers(6, S // 3 + 1))
            ow = int(rng.integers(6, S // 3 + 1))
            oy = int(rng.integers(-oh // 2, S - oh // 2))
            ox = int(rng.integers(-ow // 2, S - ow // 2))
        period = int(rng.integers(2, 6)) if kind == "stripes" else 0
        objects.append(Primitive(kind, oy, ox, oy + oh, ox + ow, _color(rng), period))

    distractor = None
    if int(rng.integers(0, 1000)) < int(round(cfg.distractor_fraction * 1000)):
        for _ in range(100):
            dh = int(rng.integers(6, S // 4 + 1))
            dw = int(rng.integers(6, S // 4 + 1))
            sy, sx = int(rng.integers(0, S - dh + 1)), int(rng.integers(0, S - dw + 1))
            dy, dx = int(rng.integers(0, S - dh + 1)), int(rng.integers(0, S - dw + 1))
            if not _overlaps((dy, dx, dy + dh, dx + dw), mirror) and (sy, sx) != (dy, dx):
                distractor = (sy, sx, dy, dx, dh, dw)
                break

    bg = (_color(rng), _color(rng), int(rng.integers(0, 3)))
    dim = cfg.dim_range[0] + (cfg.dim_range[1] - cfg.dim_range[0]) * int(rng.integers(0, 101)) / 100.0
    return SceneSpec(size=S, background_seed=int(rng.integers(0, 2**31)), background=bg, objects=objects,
                     mirror=mirror, source_offset=offset, dimming=dim, noise_std=cfg.noise_std,
                     noise_seed=int(rng.integers(0, 2**31)), distractor=distractor)


def _overlaps(a, b) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def render(spec: SceneSpec) -> np.ndarray:
    """Rasterize a scene to an ``S x S x 3`` float64 image in [0, 1]."""
    S = spec.size
    c1, c2, direction = spec.background
    yy, xx = np.mgrid[0:S, 0:S] / max(S - 1, 1)
    t = (xx, yy, 0.5 * (xx + yy))[direction][..., None]
    img = (1 - t) * np.array(c1) / 255.0 + t * np.array(c2) / 255.0
    tex_rng = np.random.Generator(np.random.PCG64(spec.background_seed))
    tiles = tex_rng.uniform(-0.08, 0.08, size=(-(-S // 8), -(-S // 8), 1))
    img = img + np.repeat(np.repeat(tiles, 8, 0), 8, 1)[:S, :S]

    for p in spec.objects:
        y0, x0, y1, x1 = max(p.y0, 0), max(p.x0, 0), min(p.y1, S), min(p.x1, S)
        if y0 >= y1 or x0 >= x1:
            continue
        region = np.ones((y1 - y0, x1 - x0), dtype=bool)
        if p.kind == "ellipse":
            cy, cx = (p.y0 + p.y1 - 1) / 2, (p.x0 + p.x1 - 1) / 2
            ry, rx = max((p.y1 - p.y0) / 2, 0.5), max((p.x1 - p.x0) / 2, 0.5)
            gy, gx = np.mgrid[y0:y1, x0:x1]
            region = ((gy - cy) / ry) ** 2 + ((gx - cx) / rx) ** 2 <= 1.0
        elif p.kind == "stripes":
            gx = np.mgrid[y0:y1, x0:x1][1]
            region = ((gx - p.x0) // p.period) % 2 == 0
        img[y0:y1, x0:x1][region] = np.array(p.color) / 255.0

    img = np.clip(img, 0.0, 1.0)
    if spec.distractor is not None:
        sy, sx, dy, dx, dh, dw = spec.distractor
        img[dy:dy + dh, dx:dx + dw] = img[sy:sy + dh, sx:sx + dw].copy()

    y0, x0, y1, x1 = spec.mirror
    sy0, sx0, sy1, sx1 = spec.source
    img[y0:y1, x0:x1] = spec.dimming * img[sy0:sy1, sx0:sx1][:, ::-1]

    if spec.noise_std > 0:
        noise = np.random.Generator(np.random.PCG64(spec.noise_seed)).normal(0.0, spec.noise_std, img.shape)
        img = np.clip(img + noise, 0.0, 1.0)
    return img


def mask_for(spec: SceneSpec) -> np.ndarray:
    m = np.zeros((spec.size, spec.size), dtype=np.uint8)
    y0, x0, y1, x1 = spec.mirror
    m[y0:y1, x0:x1] = 1
    return m


def split_of(index: int, count: int, val_fraction: float) -> str:
    n_val = int(round(count * val_fraction))
    return "val" if index >= count - n_val else "train"


def generate(seed: int, count: int, cfg: GeneratorConfig | None = None) -> list[MirrorSample]:
    """``count`` samples, deterministic per ``(seed, index)``; the last
    ``val_fraction`` of indices form the validation split."""
    cfg = cfg or GeneratorConfig()
    if count < 1:
        raise ValueError(f"count must be at least 1, got {count}")
    out = []
    for i in range(count):
        spec = sample_spec(seed, i, cfg)
        out.append(MirrorSample(render(spec), mask_for(spec), spec, split_of(i, count, cfg.val_fraction), i, seed))
    return out


# ---------------------------------------------------------------------------
# on-disk layout
# ---------------------------------------------------------------------------

MANIFEST_HEADER = "# index\tsplit\tseed\ty0\tx0\ty1\tx1"


def write_dataset(samples: list[MirrorSample], out_dir) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    lines = [MANIFEST_HEADER]
    for s in samples:
        netpbm.write_image(out / "images" / f"{s.name}.ppm", s.image)
        netpbm.write_mask(out / "masks" / f"{s.name}.pgm", s.mask)
        y0, x0, y1, x1 = s.spec.mirror if s.spec else _bbox(s.mask)
        lines.append(f"{s.index}\t{s.split}\t{s.seed}\t{y0}\t{x0}\t{y1}\t{x1}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


def _bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return 0, 0, 0, 0
    return int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1


def read_manifest(data_dir) -> list[dict]:
    path = Path(data_dir) / "manifest.txt"
    rows = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 7:
            raise ValueError(f"{path}:{n}: expected 7 tab-separated fields, got {len(parts)}")
        idx, split, seed, *rect = parts
        rows.append(dict(index=int(idx), split=split, seed=int(seed), rect=tuple(int(v) for v in rect)))
    return rows


def load_dataset(data_dir, split: str | None = None) -> list[MirrorSample]:
    """Read samples listed in the manifest; images come back as float32 in [0, 1]."""
    root = Path(data_dir)
    out = []
    for row in read_manifest(root):
        if split is not None and row["split"] != split:
            continue
        name = f"{row['index']:05d}"
        img = netpbm.read_image(root / "images" / f"{name}.ppm").astype(np.float32) / 255.0
        mask = netpbm.read_mask(root / "masks" / f"{name}.pgm")
        out.append(MirrorSample(img, mask, None, row["split"], row["index"], row["seed"], name))
    return out


def spec_to_dict(spec: SceneSpec) -> dict:
    return asdict(spec)


def quantized(samples: list[MirrorSample]) -> list[MirrorSample]:
    """Copies with images rounded to 8 bits, as they would be after a disk round trip."""
    return [MirrorSample(netpbm.to_uint8(s.image).astype(np.float32) / 255.0, s.mask, s.spec, s.split,
                         s.index, s.seed, s.name) for s in samples]
