"""Multi-scale loss, AdamW with poly decay, and the training loop."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, save_checkpoint
from .data import MirrorSample
from .model import ModelConfig, SATNet
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)

LOSS_WEIGHTS = (1.25, 1.25, 1.0, 1.5)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class LossConfig:
    weights: tuple[float, ...] = LOSS_WEIGHTS
    eps: float = 1e-7

    def __post_init__(self):
        self.weights = tuple(float(w) for w in self.weights)
        if len(self.weights) != 4:
            raise ValueError("need one loss weight per prediction scale")
        if any(w < 0 for w in self.weights):
            raise ValueError("loss weights must be non-negative")


@dataclass
class OptimConfig:
    lr: float = 6e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    eps: float = 1e-8
    total_iterations: int = 300
    power: float = 1.0

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.total_iterations < 1:
            raise ValueError("total_iterations must be at least 1")


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def bce_loss(p_logits: Tensor, mask: np.ndarray, eps: float = 1e-7) -> Tensor:
    return T.bce_two_channel(p_logits, mask, eps)


def total_loss(preds: Sequence[Tensor], mask: np.ndarray, cfg: LossConfig | None = None):
    """Weighted sum of per-scale BCE; each map is upsampled to the mask size first.

    Returns ``(total, [loss0, .., loss3])``.
    """
    cfg = cfg or LossConfig()
    if len(preds) != 4:
        raise ValueError(f"expected 4 prediction maps, got {len(preds)}")
    mask = np.asarray(mask)
    H, W = mask.shape[-2:]
    parts = []
    total = None
    for w, p in zip(cfg.weights, preds):
        if p.shape[-2:] != (H, W):
            p = T.resize_bilinear(p, H, W)
        part = bce_loss(p, mask, cfg.eps)
        parts.append(part)
        term = part * w
        total = term if total is None else total + term
    return total, parts


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def poly_lr(iteration: int, cfg: OptimConfig) -> float:
    if iteration >= cfg.total_iterations:
        return 0.0
    return cfg.lr * (1.0 - iteration / cfg.total_iterations) ** cfg.power


class AdamW:
    """Adam with decoupled weight decay over named parameters."""

    def __init__(self, named_params, cfg: OptimConfig):
        self.params: dict[str, Tensor] = dict(named_params)
        self.cfg = cfg
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float) -> None:
        cfg = self.cfg
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteError(f"non-finite gradient for parameter {name}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - cfg.beta1 ** t
        bc2 = 1.0 - cfg.beta2 ** t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            data = p.data * (1.0 - lr * cfg.weight_decay)
            data -= (lr / bc1) * m / (np.sqrt(v / bc2) + cfg.eps)
            p.data = data.astype(p.dtype, copy=False)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": v for k, v in self.m.items()}
        out.update({f"v/{k}": v for k, v in self.v.items()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step: int) -> None:
        for k in self.params:
            self.m[k] = np.array(arrays[f"m/{k}"])
            self.v[k] = np.array(arrays[f"v/{k}"])
        self.step_count = step


def adamw_step(params, grads, state: dict, lr: float, cfg: OptimConfig) -> None:
    """Functional form: update ``params`` (name -> array) in place given ``grads``."""
    state.setdefault("t", 0)
    state["t"] += 1
    t = state["t"]
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
        m = state.setdefault(("m", name), np.zeros_like(p))
        v = state.setdefault(("v", name), np.zeros_like(p))
        m[...] = cfg.beta1 * m + (1 - cfg.beta1) * g
        v[...] = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        p *= 1.0 - lr * cfg.weight_decay
        p -= lr * (m / (1 - cfg.beta1 ** t)) / (np.sqrt(v / (1 - cfg.beta2 ** t)) + cfg.eps)


# ---------------------------------------------------------------------------
# augmentation and batching
# ---------------------------------------------------------------------------

def resize_image(img: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of ``H x W x 3`` to ``size x size``."""
    H, W = img.shape[:2]
    if (H, W) == (size, size):
        return img
    mh = T.interp_matrix(H, size)
    mw = T.interp_matrix(W, size)
    rows = np.tensordot(mh, img.astype(np.float64), axes=(1, 0))  # size x W x 3
    return np.einsum("jw,iwc->ijc", mw, rows).astype(img.dtype)


def resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize, pixel-center sampling."""
    H, W = mask.shape
    if (H, W) == (size, size):
        return mask
    ys = np.minimum(((np.arange(size) + 0.5) * H / size).astype(int), H - 1)
    xs = np.minimum(((np.arange(size) + 0.5) * W / size).astype(int), W - 1)
    return mask[ys][:, xs]


def augment(img: np.ndarray, mask: np.ndarray, size: int, rng: np.random.Generator,
            scale_range=(0.75, 1.25), flip_prob: float = 0.5):
    """Random resize (factor in ``scale_range``), crop/pad to ``size``, random h-flip."""
    s = rng.uniform(*scale_range)
    n = max(1, int(round(size * s)))
    im = resize_image(img, n)
    mk = resize_mask(mask, n)
    if n >= size:
        oy, ox = rng.integers(0, n - size + 1, size=2)
        im = im[oy:oy + size, ox:ox + size]
        mk = mk[oy:oy + size, ox:ox + size]
    else:
        oy, ox = rng.integers(0, size - n + 1, size=2)
        canvas = np.zeros((size, size, 3), dtype=im.dtype)
        cmask = np.zeros((size, size), dtype=mk.dtype)
        canvas[oy:oy + n, ox:ox + n] = im
        cmask[oy:oy + n, ox:ox + n] = mk
        im, mk = canvas, cmask
    if rng.random() < flip_prob:
        im, mk = im[:, ::-1], mk[:, ::-1]
    return np.ascontiguousarray(im), np.ascontiguousarray(mk)


def to_input(images: np.ndarray, dtype) -> Tensor:
    """``B x H x W x 3`` floats -> ``B x 3 x H x W`` tensor."""
    return Tensor(np.ascontiguousarray(images.transpose(0, 3, 1, 2)), dtype=dtype)


def predict_probability(model: SATNet, images: np.ndarray) -> np.ndarray:
    """Mirror probability maps ``B x H x W`` at the images' own resolution."""
    size = model.cfg.input_size
    H, W = images.shape[1:3]
    batch = np.stack([resize_image(im, size) for im in images]) if (H, W) != (size, size) else images
    was_training = model.training
    model.eval()
    try:
        with T.no_grad():
            p0 = model(to_input(batch, model.cfg.dtype))[0]
    finally:
        model.train(was_training)
    prob = T.mirror_probability(p0.data.astype(np.float64))
    if prob.shape[1:] != (H, W):
        prob = interp2d(prob, H, W)
    return prob


def interp2d(maps: np.ndarray, H: int, W: int) -> np.ndarray:
    mh = T.interp_matrix(maps.shape[-2], H)
    mw = T.interp_matrix(maps.shape[-1], W)
    return mh @ maps @ mw.T


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    iterations: int = 300
    batch_size: int = 4
    seed: int = 0
    log_every: int = 10
    eval_every: int = 0
    checkpoint_every: int = 0
    augment: bool = True
    scale_range: tuple[float, float] = (0.75, 1.25)
    flip_prob: float = 0.5
    threshold: float = 0.5
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if isinstance(self.optim, dict):
            self.optim = OptimConfig(**self.optim)
        self.scale_range = tuple(self.scale_range)
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        self.optim.total_iterations = self.iterations

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"]["weights"] = list(self.loss.weights)
        d["scale_range"] = list(self.scale_range)
        return d


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log_lines: list[str]
    best_iou: float | None = None
    best_split: str | None = None
    losses: list[float] = field(default_factory=list)


def make_checkpoint(model: SATNet, opt: AdamW, iteration: int, rng: np.random.Generator,
                    train_cfg: TrainConfig, meta: dict | None = None) -> Checkpoint:
    arrays = {f"model/{k}": np.array(v) for k, v in model.state_dict().items()}
    arrays.update({f"optim/{k}": np.array(v) for k, v in opt.state_arrays().items()})
    m = dict(meta or {})
    m["optimizer_step"] = opt.step_count
    return Checkpoint(config=dict(model=model.cfg.to_dict(), train=train_cfg.to_dict()), arrays=arrays,
                      iteration=iteration, rng_state=rng.bit_generator.state, meta=m)


def model_from_checkpoint(ckpt: Checkpoint) -> SATNet:
    model = SATNet(ModelConfig.from_dict(ckpt.config["model"]))
    model.load_state_dict(ckpt.model_state())
    return model


def train(model: SATNet, samples: Sequence[MirrorSample], cfg: TrainConfig,
          val_samples: Sequence[MirrorSample] | None = None, out_dir=None,
          resume: Checkpoint | None = None, on_log: Callable[[str], None] | None = None,
          stop_at: int | None = None) -> TrainResult:
    """Train ``model`` in place.

    Deterministic for a given ``cfg.seed``. Every ``log_every`` iterations a
    line ``iteration<TAB>lr<TAB>loss<TAB>loss0..loss3`` is recorded. With
    ``out_dir`` the log is appended to ``metrics.tsv`` and checkpoints
    ``last.ckpt`` / ``best.ckpt`` are written; ``best`` is chosen by IoU on
    ``val_samples`` (or on the training samples if there are none).
    ``stop_at`` ends the run early (same schedule) so it can be resumed.
    """
    from .metrics import evaluate

    if not samples:
        raise ValueError("training needs at least one sample")
    size = model.cfg.input_size
    dtype = np.dtype(model.cfg.dtype)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    opt = AdamW(model.named_parameters(), cfg.optim)
    start = 0
    best_iou = None
    if resume is not None:
        model.load_state_dict(resume.model_state())
        opt.load_state_arrays(resume.optim_state(), resume.meta["optimizer_step"])
        rng.bit_generator.state = resume.rng_state
        start = resume.iteration
        best_iou = resume.meta.get("best_iou")
    score_set = list(val_samples) if val_samples else list(samples)
    score_split = "val" if val_samples else "train"
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_lines: list[str] = []
    losses: list[float] = []
    model.train()
    n = len(samples)

    def emit(line: str) -> None:
        log_lines.append(line)
        if out is not None:
            with open(out / "metrics.tsv", "a") as fh:
                fh.write(line + "\n")
        if on_log:
            on_log(line)

    def snapshot(it: int, extra: dict | None = None) -> Checkpoint:
        meta = {"best_iou": best_iou, "best_split": score_split}
        meta.update(extra or {})
        return make_checkpoint(model, opt, it, rng, cfg, meta)

    end = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
    for it in range(start, end):
        bsz = min(cfg.batch_size, n)
        idx = rng.choice(n, size=bsz, replace=False)
        imgs, masks = [], []
        for i in idx:
            s = samples[i]
            if cfg.augment:
                im, mk = augment(s.image, s.mask, size, rng, cfg.scale_range, cfg.flip_prob)
            else:
                im, mk = resize_image(s.image, size), resize_mask(s.mask, size)
            imgs.append(im)
            masks.append(mk)
        x = to_input(np.stack(imgs), dtype)
        mask = np.stack(masks)
        lr = poly_lr(it, cfg.optim)
        preds = model(x)
        loss, parts = total_loss(preds, mask, cfg.loss)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDiverged(f"loss became {value} at iteration {it}")
        model.zero_grad()
        loss.backward()
        opt.step(lr)
        losses.append(value)
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            emit(f"{it}\t{lr:.6e}\t{value:.6f}\t" + "\t".join(f"{float(p.data):.6f}" for p in parts))
        done = it + 1
        if cfg.eval_every and done % cfg.eval_every == 0 or done == cfg.iterations:
            score = evaluate(model, score_set, cfg.threshold).iou
            if best_iou is None or score > best_iou:
                best_iou = score
                if out is not None:
                    save_checkpoint(out / "best.ckpt", snapshot(done, {"score_iou": score}))
            model.train()
        if out is not None and (cfg.checkpoint_every and done % cfg.checkpoint_every == 0
                                or done == cfg.iterations):
            save_checkpoint(out / "last.ckpt", snapshot(done))
    final = snapshot(end)
    return TrainResult(final, log_lines, best_iou, score_split, losses)
