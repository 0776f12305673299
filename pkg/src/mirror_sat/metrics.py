"""IoU, F-measure and MAE for binary mirror masks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DimensionError

BETA_SQ = 0.3


@dataclass
class Counts:
    tp: int
    fp: int
    fn: int
    tn: int


@dataclass
class ImageScore:
    name: str
    iou: float
    f_beta: float
    mae: float
    counts: Counts


@dataclass
class EvalResult:
    per_image: list[ImageScore] = field(default_factory=list)
    threshold: float = 0.5

    @property
    def iou(self) -> float:
        return float(np.mean([s.iou for s in self.per_image]))

    @property
    def f_beta(self) -> float:
        return float(np.mean([s.f_beta for s in self.per_image]))

    @property
    def mae(self) -> float:
        return float(np.mean([s.mae for s in self.per_image]))

    def report_lines(self) -> list[str]:
        lines = [f"{s.name}\t{s.iou:.6f}\t{s.f_beta:.6f}\t{s.mae:.6f}" for s in self.per_image]
        lines.append(f"MEAN\t{self.iou:.6f}\t{self.f_beta:.6f}\t{self.mae:.6f}")
        return lines


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: prediction {a.shape} vs ground truth {b.shape}")


def _binary(x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x)
    if not np.all((x == 0) | (x == 1)):
        raise ValueError(f"{what} must be binary (0/1)")
    return x.astype(bool)


def confusion(pred: np.ndarray, gt: np.ndarray) -> Counts:
    p, g = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    _same_shape(p, g, "confusion")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return Counts(tp, fp, fn, p.size - tp - fp - fn)


def iou(pred_mask: np.ndarray, gt: np.ndarray) -> float:
    """``|pred & gt| / |pred | gt|``; 1.0 when both are empty."""
    p, g = _binary(pred_mask, "pred_mask"), _binary(gt, "gt")
    _same_shape(p, g, "iou")
    return _iou_from(confusion(p, g))


def _iou_from(c: Counts) -> float:
    union = c.tp + c.fp + c.fn
    return 1.0 if union == 0 else c.tp / union


def _check_threshold(threshold: float) -> None:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    _check_threshold(threshold)
    return np.asarray(prob) >= threshold


def f_beta(pred_prob: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> float:
    """F-measure with beta^2 = 0.3 at a fixed threshold.

    Empty prediction and empty ground truth score 1.0; otherwise a zero
    precision or recall scores 0.0.
    """
    _check_threshold(threshold)
    g = _binary(gt, "gt")
    p = np.asarray(pred_prob)
    _same_shape(p, g, "f_beta")
    return _fbeta_from(confusion(binarize(p, threshold), g))


def _fbeta_from(c: Counts) -> float:
    if c.tp + c.fp + c.fn == 0:
        return 1.0
    if c.tp == 0:
        return 0.0
    precision = c.tp / (c.tp + c.fp)
    recall = c.tp / (c.tp + c.fn)
    return (1 + BETA_SQ) * precision * recall / (BETA_SQ * precision + recall)


def mae(pred_prob: np.ndarray, gt: np.ndarray) -> float:
    p = np.asarray(pred_prob, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    _same_shape(p, g, "mae")
    return float(np.abs(p - g).mean())


def score_image(name: str, prob: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> ImageScore:
    g = _binary(gt, "gt")
    _same_shape(np.asarray(prob), g, "score_image")
    c = confusion(binarize(prob, threshold), g)
    return ImageScore(name, _iou_from(c), _fbeta_from(c), mae(prob, g), c)


def evaluate(model, samples, threshold: float = 0.5, batch_size: int = 8) -> EvalResult:
    """Score the model's final prediction on each sample (eval-mode BN)."""
    from .train import predict_probability

    _check_threshold(threshold)
    if not samples:
        raise ValueError("evaluate needs at least one sample")
    result = EvalResult(threshold=threshold)
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        probs = predict_probability(model, np.stack([s.image for s in chunk]))
        for s, prob in zip(chunk, probs):
            result.per_image.append(score_image(s.name, prob, s.mask, threshold))
    return result
