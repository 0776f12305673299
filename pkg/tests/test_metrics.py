import numpy as np
import pytest

from mirror_sat.metrics import BETA_SQ, EvalResult, confusion, evaluate, f_beta, iou, mae, score_image
from mirror_sat.tensor import DimensionError


def brute_force(prob, gt, threshold=0.5):
    """Pixel loop with integer counters; the reference for every metric."""
    tp = fp = fn = tn = 0
    abs_sum = 0.0
    H, W = gt.shape
    for i in range(H):
        for j in range(W):
            p = 1 if prob[i, j] >= threshold else 0
            g = int(gt[i, j])
            tp += p and g
            fp += p and not g
            fn += (not p) and g
            tn += (not p) and not g
            abs_sum += abs(float(prob[i, j]) - g)
    union = tp + fp + fn
    iou_v = 1.0 if union == 0 else tp / union
    if union == 0:
        fb = 1.0
    elif tp == 0:
        fb = 0.0
    else:
        P, R = tp / (tp + fp), tp / (tp + fn)
        fb = (1 + 0.3) * P * R / (0.3 * P + R)
    return (tp, fp, fn, tn), iou_v, fb, abs_sum / (H * W)


def random_pair(rng):
    H, W = rng.integers(3, 12, size=2)
    gt = (rng.random((H, W)) < rng.uniform(0, 1)).astype(np.uint8)
    prob = rng.random((H, W))
    if rng.random() < 0.1:
        gt[:] = 0
    if rng.random() < 0.1:
        prob[:] = 0.1
    return prob, gt


def test_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        prob, gt = random_pair(rng)
        counts, iou_v, fb, m = brute_force(prob, gt)
        s = score_image("x", prob, gt)
        assert (s.counts.tp, s.counts.fp, s.counts.fn, s.counts.tn) == counts
        assert abs(s.iou - iou_v) <= 1e-12
        assert abs(s.f_beta - fb) <= 1e-12
        assert abs(s.mae - m) <= 1e-12
        assert iou(prob >= 0.5, gt) == s.iou


def test_iou_examples():
    gt = np.zeros((4, 4), np.uint8)
    gt[:, :2] = 1
    pred = np.zeros((4, 4), np.uint8)
    pred[:2, :] = 1
    assert iou(pred, gt) == pytest.approx(1 / 3)
    assert iou(gt, gt) == 1.0
    assert iou(1 - gt, gt) == 0.0
    assert iou(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    assert iou(np.zeros((3, 3)), np.eye(3)) == 0.0


def test_fbeta_examples():
    gt = np.array([[1, 0], [0, 0]])
    assert f_beta(gt.astype(float), gt) == 1.0
    pred = np.array([[1.0, 1.0], [0.0, 0.0]])  # P = 0.5, R = 1
    assert abs(f_beta(pred, gt) - 0.65 / 1.15) < 1e-6
    assert abs(0.65 / 1.15 - 0.565217) < 1e-6
    assert f_beta(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
    assert f_beta(np.zeros((2, 2)), gt) == 0.0
    assert BETA_SQ == 0.3
    with pytest.raises(ValueError):
        f_beta(pred, gt, threshold=1.5)


def test_mae_examples():
    gt = np.array([[0, 1], [1, 0]])
    assert mae(gt.astype(float), gt) == 0.0
    assert mae(np.full((3, 3), 0.25), np.zeros((3, 3))) == 0.25
    assert mae(np.array([[0.1, 0.9], [0.5, 0.0]]), gt) == pytest.approx(0.175, abs=1e-15)


def test_shape_mismatch_is_dimension_error():
    with pytest.raises(DimensionError):
        iou(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(DimensionError):
        mae(np.zeros((2, 2)), np.zeros((3, 2)))


def test_invariances():
    rng = np.random.default_rng(1)
    for _ in range(20):
        prob, gt = random_pair(rng)
        a = score_image("a", prob, gt)
        b = score_image("b", prob[:, ::-1], gt[:, ::-1])
        assert (a.iou, a.f_beta) == (b.iou, b.f_beta)
        assert mae(1 - prob, 1 - gt) == pytest.approx(mae(prob, gt), abs=1e-15)
        for v in (a.iou, a.f_beta, a.mae):
            assert 0.0 <= v <= 1.0
        c = confusion(prob >= 0.5, gt)
        assert c.tp + c.fp + c.fn + c.tn == gt.size


def test_report_format():
    r = EvalResult([score_image("00000", np.ones((2, 2)), np.ones((2, 2), np.uint8)),
                    score_image("00001", np.zeros((2, 2)), np.ones((2, 2), np.uint8))])
    lines = r.report_lines()
    assert lines[0] == "00000\t1.000000\t1.000000\t0.000000"
    assert lines[-1] == "MEAN\t0.500000\t0.500000\t0.500000"


class _Constant:
    """Stand-in model whose P0 softmax is 0.5 everywhere."""

    def __init__(self):
        from mirror_sat.model import ModelConfig

        self.cfg = ModelConfig(input_size=32, dtype="float64")
        self.training = False

    def eval(self):
        self.training = False

    def train(self, mode=True):
        self.training = mode

    def __call__(self, x):
        from mirror_sat.tensor import Tensor

        B = x.shape[0]
        return [Tensor(np.zeros((B, 2, 8, 8)))] + [None] * 3


def test_evaluate_constant_half_gives_mae_half():
    from mirror_sat.data import MirrorSample

    rng = np.random.default_rng(0)
    samples = []
    for i in range(4):
        mask = np.zeros((32, 32), np.uint8)
        mask.flat[rng.permutation(32 * 32)[:512]] = 1
        samples.append(MirrorSample(rng.random((32, 32, 3)).astype(np.float32), mask, None, "val", i, 0, f"{i:05d}"))
    r = evaluate(_Constant(), samples)
    assert r.mae == 0.5
    assert len(r.per_image) == 4


def test_evaluate_matches_oracle_on_a_model():
    from mirror_sat.data import generate, quantized
    from mirror_sat.model import ModelConfig, SATNet
    from mirror_sat.backbone import BackboneConfig
    from mirror_sat.train import predict_probability

    model = SATNet(ModelConfig(backbone=BackboneConfig(embed_dim=8, heads=(1, 1, 2, 2))))
    samples = quantized(generate(0, 5))
    r = evaluate(model, samples, batch_size=2)
    probs = predict_probability(model, np.stack([s.image for s in samples]))
    for s, prob, got in zip(samples, probs, r.per_image):
        counts, iou_v, fb, m = brute_force(prob, s.mask)
        assert (got.counts.tp, got.counts.fp, got.counts.fn, got.counts.tn) == counts
        assert got.iou == pytest.approx(iou_v, abs=1e-12)
        assert got.f_beta == pytest.approx(fb, abs=1e-12)
        assert got.mae == pytest.approx(m, abs=1e-12)
    assert model.training  # evaluate restores the mode it found
