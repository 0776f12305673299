import numpy as np
import pytest
from numpy.testing import assert_allclose

from mirror_sat import train as train_mod
from mirror_sat.backbone import BackboneConfig
from mirror_sat.checkpoint import load_checkpoint, to_bytes
from mirror_sat.data import GeneratorConfig, generate, quantized
from mirror_sat.model import ModelConfig, SATNet
from mirror_sat.tensor import NonFiniteError, Tensor
from mirror_sat.train import (AdamW, LossConfig, OptimConfig, TrainConfig, TrainingDiverged, adamw_step, augment,
                              poly_lr, total_loss, train)

LN2 = np.log(2.0)


def uniform_preds(size=8, batch=2):
    return [Tensor(np.zeros((batch, 2, size >> i, size >> i)), dtype=np.float64) for i in range(4)]


def toy_cfg(**kw):
    return ModelConfig(input_size=32, backbone=BackboneConfig(embed_dim=8, heads=(1, 1, 2, 2)), **kw)


def toy_samples(n=4):
    return quantized(generate(3, n, GeneratorConfig(size=32)))


def test_uniform_predictions_give_weighted_ln2():
    mask = (np.random.default_rng(0).random((2, 8, 8)) > 0.5).astype(float)
    total, parts = total_loss(uniform_preds(), mask)
    assert abs(float(total.data) - 5.0 * LN2) < 1e-6
    assert abs(5.0 * LN2 - 3.465736) < 1e-6
    for p in parts:
        assert_allclose(float(p.data), LN2, rtol=1e-12)


def test_zero_weights_give_zero_loss():
    mask = np.ones((2, 8, 8))
    total, _ = total_loss(uniform_preds(), mask, LossConfig(weights=(0, 0, 0, 0)))
    assert float(total.data) == 0.0


def test_gradient_reaches_every_head():
    rng = np.random.default_rng(0)
    preds = [Tensor(rng.standard_normal((2, 2, 8 >> i, 8 >> i)), requires_grad=True, dtype=np.float64)
             for i in range(4)]
    mask = (rng.random((2, 8, 8)) > 0.5).astype(float)
    total, _ = total_loss(preds, mask)
    total.backward()
    assert all(np.linalg.norm(p.grad) > 0 for p in preds)


def test_poly_schedule():
    cfg = OptimConfig(total_iterations=1000)
    assert poly_lr(0, cfg) == 6e-4
    assert poly_lr(500, cfg) == 3e-4
    assert poly_lr(1000, cfg) == 0.0
    assert poly_lr(1500, cfg) == 0.0
    lrs = [poly_lr(i, cfg) for i in range(1001)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert_allclose(np.diff(lrs[:-1]), -6e-7, rtol=1e-9)


def test_adamw_null_update():
    p = {"w": np.array([1.0, -2.0])}
    adamw_step(p, {"w": np.zeros(2)}, {}, 0.1, OptimConfig(weight_decay=0.0))
    assert np.array_equal(p["w"], [1.0, -2.0])


def test_adamw_weight_decay_only():
    p = {"w": np.array([2.0])}
    state = {}
    for k in range(1, 6):
        adamw_step(p, {"w": np.zeros(1)}, state, 0.1, OptimConfig(weight_decay=0.01))
        assert_allclose(p["w"], 2.0 * (1 - 0.001) ** k, rtol=1e-14)


def test_adamw_quadratic_converges():
    cfg = OptimConfig(lr=0.1, weight_decay=0.0)
    p, state, hist = {"x": np.array([1.0])}, {}, []
    for _ in range(200):
        adamw_step(p, {"x": 2 * p["x"]}, state, 0.1, cfg)
        hist.append(abs(p["x"][0]))
    assert hist[-1] < 1e-2
    # after a 40-step warmup the envelope of |x| shrinks window by window
    env = np.array(hist[40:]).reshape(-1, 10).max(axis=1)
    assert (np.diff(env) < 0).all()


def test_adamw_nan_gradient_names_parameter():
    with pytest.raises(NonFiniteError, match="bias"):
        adamw_step({"bias": np.zeros(2)}, {"bias": np.array([0.0, np.nan])}, {}, 0.1, OptimConfig())
    w = Tensor(np.zeros(2), requires_grad=True)
    w.grad = np.array([np.inf, 0.0])
    with pytest.raises(NonFiniteError, match="layer.w"):
        AdamW([("layer.w", w)], OptimConfig()).step(0.1)


def test_class_and_functional_adamw_agree():
    rng = np.random.default_rng(0)
    w0 = rng.standard_normal(5)
    w = Tensor(w0.copy(), requires_grad=True, dtype=np.float64)
    opt = AdamW([("w", w)], OptimConfig())
    p, state = {"w": w0.copy()}, {}
    for _ in range(5):
        g = rng.standard_normal(5)
        w.grad = g
        opt.step(1e-2)
        adamw_step(p, {"w": g}, state, 1e-2, OptimConfig())
    assert_allclose(w.data, p["w"], rtol=1e-13)


def test_augment_contract():
    rng = np.random.default_rng(0)
    s = toy_samples(1)[0]
    for _ in range(10):
        im, mk = augment(s.image, s.mask, 32, rng)
        assert im.shape == (32, 32, 3) and mk.shape == (32, 32)
        assert set(np.unique(mk)) <= {0, 1}
    im, mk = augment(s.image, s.mask, 32, rng, scale_range=(1.0, 1.0), flip_prob=1.0)
    assert np.array_equal(mk, s.mask[:, ::-1])
    assert_allclose(im, s.image[:, ::-1])


def test_initial_loss_near_uniform():
    samples = toy_samples(4)
    res = train(SATNet(toy_cfg()), samples, TrainConfig(iterations=1, batch_size=4, augment=False))
    assert abs(res.losses[0] - 5 * LN2) < 0.2 * 5 * LN2


def test_same_seed_gives_identical_checkpoints():
    samples = toy_samples(4)
    cfg = TrainConfig(iterations=4, batch_size=2, log_every=1)
    a = train(SATNet(toy_cfg()), samples, cfg)
    b = train(SATNet(toy_cfg()), samples, cfg)
    assert to_bytes(a.checkpoint) == to_bytes(b.checkpoint)
    assert a.log_lines == b.log_lines


def test_resume_equals_uninterrupted_run():
    samples = toy_samples(4)
    cfg = TrainConfig(iterations=6, batch_size=2, log_every=1)
    full = train(SATNet(toy_cfg()), samples, cfg)
    first = train(SATNet(toy_cfg()), samples, cfg, stop_at=3)
    assert first.checkpoint.iteration == 3
    fresh = SATNet(toy_cfg())
    for p in fresh.parameters():
        p.data[...] = 0  # everything must come from the checkpoint
    second = train(fresh, samples, cfg, resume=first.checkpoint)
    assert to_bytes(second.checkpoint) == to_bytes(full.checkpoint)
    assert first.log_lines + second.log_lines == full.log_lines


def test_log_and_checkpoint_files(tmp_path):
    samples = toy_samples(4)
    res = train(SATNet(toy_cfg()), samples, TrainConfig(iterations=3, batch_size=2, log_every=1), out_dir=tmp_path)
    lines = (tmp_path / "metrics.tsv").read_text().splitlines()
    assert lines == res.log_lines and len(lines) == 3
    assert all(len(line.split("\t")) == 7 for line in lines)
    best = load_checkpoint(tmp_path / "best.ckpt")
    assert best.meta["best_split"] == "train"
    assert load_checkpoint(tmp_path / "last.ckpt").iteration == 3


def test_divergence_aborts_and_keeps_last_good_checkpoint(tmp_path, monkeypatch):
    real = train_mod.total_loss
    calls = {"n": 0}

    def poisoned(preds, mask, cfg=None):
        calls["n"] += 1
        total, parts = real(preds, mask, cfg)
        return (total * np.nan if calls["n"] == 3 else total), parts

    monkeypatch.setattr(train_mod, "total_loss", poisoned)
    cfg = TrainConfig(iterations=5, batch_size=2, checkpoint_every=1)
    with pytest.raises(TrainingDiverged, match="iteration 2"):
        train(SATNet(toy_cfg()), toy_samples(4), cfg, out_dir=tmp_path)
    last = load_checkpoint(tmp_path / "last.ckpt")
    assert last.iteration == 2
    assert all(np.isfinite(a).all() for a in last.arrays.values())


def test_train_rejects_empty_dataset():
    with pytest.raises(ValueError):
        train(SATNet(toy_cfg()), [], TrainConfig(iterations=1))
