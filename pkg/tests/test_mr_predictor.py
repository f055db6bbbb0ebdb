import numpy as np
import pytest

from meanflow_tse import checkpoint
from meanflow_tse.mr_predictor import (MRConfig, init_mr, load_mr, mr_features, mr_grad_check, mr_loss,
                                       mr_predict, save_mr)
from meanflow_tse.signal import Waveform, gen_dataset, synth_source
from meanflow_tse.trainer import MRTrainConfig, train_mr


def test_features_deterministic_and_level_slot():
    w = synth_source(2, 0.25, 8000, 1)
    f1, f2 = mr_features(w), mr_features(w)
    assert np.array_equal(f1, f2)
    n_emb = 2 * 33
    f_loud = mr_features(Waveform(2 * w.samples, 8000))
    assert f_loud[n_emb] - f1[n_emb] == pytest.approx(20 * np.log10(2), abs=1e-6)
    np.testing.assert_allclose(f_loud[n_emb + 1:], f1[n_emb + 1:], atol=1e-12)


def test_features_silence_and_empty():
    f = mr_features(Waveform(np.zeros(1000), 8000))
    assert f[0] == pytest.approx(-8.0)
    assert f[66] == pytest.approx(-80.0)
    with pytest.raises(ValueError):
        mr_features(np.array([]))


def test_untrained_predicts_half_and_range():
    ex = gen_dataset(2, seed=1, duration_s=0.25)
    cfg = MRConfig(in_dim=2 * (66 + 1 + 8))
    p = init_mr(cfg, np.random.default_rng(0))
    assert mr_predict(p, ex[0].y, ex[0].e) == 0.5
    rng = np.random.default_rng(1)
    for k in p.arrays:
        if k.startswith("w") or k.startswith("b"):
            p.arrays[k] = rng.standard_normal(p.arrays[k].shape) * 3
    for e in ex:
        assert 0.0 < mr_predict(p, e.y, e.e) < 1.0


def test_mr_loss():
    assert mr_loss(0.3, 0.3) == (0.0, 0.0)
    assert mr_loss(1.0, 0.0)[0] == 1.0
    for lh, l in [(0.2, 0.7), (0.9, 0.1), (0.55, 0.5)]:
        eps = 1e-6
        num = (mr_loss(lh + eps, l)[0] - mr_loss(lh - eps, l)[0]) / (2 * eps)
        assert abs(num - mr_loss(lh, l)[1]) < 1e-6


@pytest.mark.parametrize("seed", range(20))
def test_mr_gradients_match_fd(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(2, 6))
    cfg = MRConfig(in_dim=d, hidden=int(rng.integers(2, 6)), n_layers=int(rng.integers(1, 3)))
    p = init_mr(cfg, rng, rng.standard_normal(d), rng.uniform(0.5, 2, d))
    p.arrays["w_out"] = rng.standard_normal(p.arrays["w_out"].shape)
    p.arrays["b_out"] = rng.standard_normal(1)
    feats = rng.standard_normal((int(rng.integers(1, 8)), d))
    lams = rng.uniform(0, 1, feats.shape[0])
    assert mr_grad_check(p, feats, lams, 1e-6) < 1e-4


def test_training_beats_baseline_and_is_deterministic(tmp_path):
    tr = gen_dataset(96, seed=21, duration_s=0.25)
    va = gen_dataset(32, seed=22, duration_s=0.25)
    cfg = MRTrainConfig(epochs=30)
    p1, s1 = train_mr(cfg, tr, va, tmp_path / "a")
    p2, s2 = train_mr(cfg, tr, va, tmp_path / "b")
    assert s1 == s2
    assert (tmp_path / "a" / "mr.ckpt").read_bytes() == (tmp_path / "b" / "mr.ckpt").read_bytes()
    lam = np.array([e.lam for e in va])
    # constant 0.5 predictor: MSE = var(lambda) + (mean - 0.5)^2
    assert s1["untrained_mse"] == pytest.approx(np.var(lam) + (lam.mean() - 0.5) ** 2, rel=1e-12)
    assert s1["val_mse"] < s1["baseline_mse"]


def test_mr_checkpoint(tmp_path):
    p = init_mr(MRConfig(in_dim=4, hidden=3), np.random.default_rng(0))
    save_mr(tmp_path / "m.ckpt", p)
    q, _ = load_mr(tmp_path / "m.ckpt")
    assert all(np.array_equal(p.arrays[k], q.arrays[k]) for k in p.arrays)
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(tmp_path / "m.ckpt", checkpoint.VELOCITY_MAGIC)
