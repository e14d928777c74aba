import csv

import numpy as np
import pytest
import torch

from singhead import cvae, synthetic, training
from singhead.cvae import ModelConfig
from singhead.errors import DataError, ValidationError
from singhead.losses import LossWeights
from singhead.motion_core import MotionSequence, ShapeParams

SMALL = ModelConfig(d=32, n_layers_enc=1, n_layers_dec=1, n_heads=4, d_a=16, ppe_period=30)


def state_equal(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


def test_overfit_single_example(toy_data):
    model = training.build_model(SMALL, seed=1)
    cfg = training.TrainConfig(epochs=500, batch_size=1, lr=2e-3, seed=0, weights=LossWeights(1, 1, 0))
    result = training.train(model, toy_data[:1], cfg)
    first, last = result.step_history[0]["L_re"], result.step_history[-1]["L_re"]
    assert len(result.step_history) == 500
    assert first / last >= 100


def test_same_seed_same_weights(toy_data):
    cfg = training.TrainConfig(epochs=3, batch_size=2, lr=1e-3, seed=5)
    a = training.train(training.build_model(SMALL, 2), toy_data, cfg)
    b = training.train(training.build_model(SMALL, 2), toy_data, cfg)
    assert state_equal(a.model, b.model)
    assert a.history == b.history
    c = training.train(training.build_model(SMALL, 2), toy_data, training.TrainConfig(
        epochs=3, batch_size=2, lr=1e-3, seed=6))
    assert not state_equal(a.model, c.model)


def test_kl_only_pulls_posterior_to_prior(toy_data):
    model = training.build_model(SMALL, seed=4)
    ex = toy_data[0]
    with torch.no_grad():
        model.mu_token.add_(1.0)

    def mean_abs_mu():
        return float(np.mean(np.abs(cvae.encode(model, MotionSequence(ex.motion), ShapeParams(ex.shape), ex.audio).mu)))

    before = mean_abs_mu()
    cfg = training.TrainConfig(epochs=50, batch_size=4, lr=1e-3, weights=LossWeights(0, 0, 1))
    result = training.train(model, toy_data, cfg)
    after = mean_abs_mu()
    assert after < before
    assert result.history[-1]["L_kl"] < result.history[0]["L_kl"]


def test_resume_matches_uninterrupted(toy_data, tmp_path):
    cfg = training.TrainConfig(epochs=4, batch_size=3, lr=1e-3, seed=9, checkpoint_every=2)
    full = training.train(training.build_model(SMALL, 0), toy_data, cfg, checkpoint_dir=tmp_path / "a")
    ckpt = tmp_path / "a" / "epoch_000002.ckpt"
    assert ckpt.exists() and (tmp_path / "a" / "epoch_000004.ckpt").exists()
    resumed = training.train(training.build_model(SMALL, 123), toy_data, cfg, resume_from=ckpt)
    assert state_equal(full.model, resumed.model)
    assert full.history == resumed.history
    assert full.step_history == resumed.step_history


def test_resume_rejects_other_config(toy_data, tmp_path):
    cfg = training.TrainConfig(epochs=1, batch_size=4, lr=1e-3)
    training.train(training.build_model(SMALL, 0), toy_data, cfg, checkpoint_dir=tmp_path)
    other = training.build_model(ModelConfig(d=16, n_layers_enc=1, n_layers_dec=1, n_heads=2, d_a=16), 0)
    with pytest.raises(ValidationError):
        training.train(other, toy_data, cfg, resume_from=tmp_path / "epoch_000001.ckpt")


def test_empty_dataset_rejected():
    with pytest.raises(DataError):
        training.train(training.build_model(SMALL, 0), [], training.TrainConfig(epochs=1))


def test_example_validation():
    with pytest.raises(ValidationError):
        training.Example(np.zeros((5, 16)), np.zeros(100), np.zeros((4, 100)))
    with pytest.raises(ValidationError):
        training.Example(np.zeros((5, 16)), np.zeros(99), np.zeros((5, 100)))
    with pytest.raises(ValidationError):
        training.TrainConfig(lr=0)


def test_history_csv(toy_data, tmp_path):
    result = training.train(training.build_model(SMALL, 0), toy_data,
                            training.TrainConfig(epochs=2, batch_size=4, lr=1e-3))
    path = tmp_path / "losses.csv"
    training.write_history_csv(path, result.history)
    rows = list(csv.DictReader(open(path)))
    assert list(rows[0]) == ["epoch", "L_re", "L_vel", "L_kl", "total"]
    assert [int(r["epoch"]) for r in rows] == [1, 2]
    for r, h in zip(rows, result.history):
        assert float(r["total"]) == h["total"]


def test_load_config(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[model]\nd = 64\nn_heads = 8\n[train]\nlr = 0.001\nepochs = 7\n[weights]\nlambda_k = 0.01\n")
    mcfg, tcfg = training.load_config(path)
    assert (mcfg.d, mcfg.n_heads, mcfg.n_layers_enc) == (64, 8, 2)
    assert (tcfg.lr, tcfg.epochs, tcfg.weights.lambda_k, tcfg.weights.lambda_r) == (0.001, 7, 0.01, 1.0)
    path.write_text("[model]\nwidth = 3\n")
    with pytest.raises(ValidationError):
        training.load_config(path)
    with pytest.raises(DataError):
        training.load_config(tmp_path / "missing.ini")


def test_synthetic_dataset_shapes():
    data = synthetic.make_dataset(3, T=20, d_a=8, seed=1)
    assert len(data) == 3
    assert data[0].audio.shape == (20, 8) and data[0].motion.shape == (20, 100)
    again = synthetic.make_dataset(3, T=20, d_a=8, seed=1)
    assert all(np.array_equal(a.motion, b.motion) for a, b in zip(data, again))
