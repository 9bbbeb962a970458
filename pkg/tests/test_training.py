import dataclasses
import math

import numpy as np
import pytest

from mixrul import network as nw
from mixrul.dataset import WindowedSamples
from mixrul.distributions import Family, MixtureSpec
from mixrul.errors import ConfigError, NumericError
from mixrul.scale import mle_sigma_lognormal
from mixrul.training import (
    AdamState, TrainConfig, adam_step, batch_nll, initial_sigma, loss_and_grad, sigma_change,
    train, train_dlbp1, train_dlbp2,
)

LN, W, LL = Family.LOGNORMAL, Family.WEIBULL, Family.LOGLOGISTIC


def toy_model(kind, fams, seed=1, time_unit=1.0):
    spec = MixtureSpec(fams)
    shared = [1.3 if f is not W else 3.0 for f in fams] if kind == nw.DLBP2 else None
    m = nw.init_model(kind, spec, 3, (4, 3), (4,), seed=seed, shared_sigma=shared,
                      time_unit=time_unit)
    rng = np.random.default_rng(seed)
    for _, a in m.named_tensors():
        a += rng.normal(0, 0.3, a.shape)
    return m


def numeric_grads(model, X, y, h=1e-5):
    out = {}
    for name, a in model.named_tensors():
        num = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + h
            lp = batch_nll(X, y, model)
            a[idx] = orig - h
            lm = batch_nll(X, y, model)
            a[idx] = orig
            num[idx] = (lp - lm) / (2 * h)
        out[name] = num
    return out


def samples_from(X, y):
    n = len(y)
    return WindowedSamples(np.asarray(X, float), np.asarray(y, float),
                           np.repeat(np.arange(1, 3), math.ceil(n / 2))[:n], np.arange(1, n + 1))


CASES = [(kind, fams) for kind in (nw.DLBP1, nw.DLBP2)
         for fams in [(LN,), (W,), (LL,), (W, W), (LL, LL), (LN, W)]]


class TestGradients:
    @pytest.mark.parametrize("kind, fams", CASES)
    def test_finite_differences(self, kind, fams):
        rng = np.random.default_rng(0)
        m = toy_model(kind, fams)
        X = rng.uniform(0, 1, (6, 4, 3))
        y = rng.uniform(1, 5, 6)
        _, g = loss_and_grad(X, y, m)
        num = numeric_grads(m, X, y)
        for name, _ in m.named_tensors():
            err = np.abs(g[name] - num[name])
            bound = 1e-4 * np.maximum(np.abs(g[name]), np.abs(num[name])) + 1e-8
            assert np.all(err <= bound), name

    @pytest.mark.parametrize("fams", [(LN, W), (LL, LL)])
    def test_finite_differences_with_time_unit(self, fams):
        rng = np.random.default_rng(1)
        m = toy_model(nw.DLBP1, fams, time_unit=40.0)
        X = rng.uniform(0, 1, (5, 3, 3))
        y = rng.uniform(10, 120, 5)
        _, g = loss_and_grad(X, y, m)
        num = numeric_grads(m, X, y)
        for name, _ in m.named_tensors():
            np.testing.assert_allclose(g[name], num[name], rtol=1e-4, atol=1e-8, err_msg=name)

    def test_no_grad_for_shared_sigma(self):
        m = toy_model(nw.DLBP2, (LN, W))
        _, g = loss_and_grad(np.ones((2, 4, 3)), [2.0, 3.0], m)
        assert set(g) == {n for n, _ in m.named_tensors()}

    def test_duplicated_batch(self):
        rng = np.random.default_rng(2)
        m = toy_model(nw.DLBP1, (LL, LL))
        X, y = rng.uniform(size=(4, 4, 3)), rng.uniform(1, 9, 4)
        l1, g1 = loss_and_grad(X, y, m)
        l2, g2 = loss_and_grad(np.r_[X, X], np.r_[y, y], m)
        assert l1 == pytest.approx(l2, rel=1e-14)
        for k in g1:
            np.testing.assert_allclose(g1[k], g2[k], rtol=1e-12, atol=1e-15)

    def test_stationary_point(self):
        rng = np.random.default_rng(3)
        y = rng.lognormal(2.0, 0.5, 40)
        m = nw.init_model(nw.DLBP1, MixtureSpec((LN,)), 3, (2,), (), seed=0)
        m.head.W[:] = 0.0
        m.head.b[:] = [np.log(y).mean(), 0.2, 0.0]
        _, g = loss_and_grad(rng.uniform(size=(40, 3, 3)), y, m)
        assert abs(g["head.b"][0]) < 1e-8

    def test_nonfinite_loss_names_sample(self):
        m = nw.init_model(nw.DLBP1, MixtureSpec((W,)), 1, (2,), (), seed=0)
        m.head.W[:] = 0.0
        m.head.b[:] = [1000.0, -800.0, 0.0]  # (y / sigma) ** shape overflows
        with pytest.raises(NumericError, match="asset 7"):
            loss_and_grad(np.zeros((1, 2, 1)), [1e6], m, asset_ids=[7], window_index=[3])


class TestAdam:
    def test_zero_gradient_identity(self):
        p = {"a": np.array([1.0, -2.0])}
        adam_step(p, {"a": np.zeros(2)}, AdamState(), 0.1)
        np.testing.assert_array_equal(p["a"], [1.0, -2.0])

    def test_first_step_is_sign(self):
        p = {"a": np.array([0.0, 0.0, 0.0])}
        adam_step(p, {"a": np.array([3.0, -0.01, 50.0])}, AdamState(), 0.1, eps=0.0)
        np.testing.assert_allclose(p["a"], [-0.1, 0.1, -0.1], rtol=1e-14)

    def test_quadratic(self):
        target = np.array([1.5, -0.5])
        p = {"x": np.zeros(2)}
        st = AdamState()
        for _ in range(100):
            adam_step(p, {"x": 2 * (p["x"] - target)}, st, 0.05, beta1=0.5, beta2=0.9)
        np.testing.assert_allclose(p["x"], target, atol=1e-3)


def synthetic_samples(n=60, T=4, P=2, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, T, P))
    y = np.exp(1.0 + X[:, -1, 0] + rng.normal(0, 0.3, n))
    return WindowedSamples(X, y, np.repeat(np.arange(1, n // 10 + 1), 10),
                           np.tile(np.arange(1, 11), n // 10))


class TestTrainLoops:
    def test_lr_zero_keeps_init(self):
        s = synthetic_samples()
        cfg = TrainConfig(families=("lognormal",), window=4, lstm_units=(3,), fc_units=(),
                          batch_size=16, epochs=1, learning_rate=0.0)
        res = train_dlbp1(s, cfg)
        init = nw.init_model(nw.DLBP1, cfg.spec, 2, (3,), (), seed=0, time_unit=cfg.time_unit)
        for (n, a), (_, b) in zip(res.model.named_tensors(), init.named_tensors()):
            np.testing.assert_array_equal(a, b, err_msg=n)

    def test_loss_decreases(self):
        s = synthetic_samples(200)
        cfg = TrainConfig(families=("lognormal",), window=4, lstm_units=(4,), fc_units=(4,),
                          batch_size=32, epochs=15, learning_rate=1e-2, time_unit=10.0)
        res = train(s, cfg)
        assert res.history[-1]["loss"] < res.history[0]["loss"]

    def test_deterministic(self):
        s = synthetic_samples()
        cfg = TrainConfig(families=("weibull", "weibull"), window=4, lstm_units=(3,),
                          fc_units=(2,), batch_size=16, epochs=3, seed=5)
        a, b = train(s, cfg), train(s, cfg)
        assert [h["loss"] for h in a.history] == [h["loss"] for h in b.history]
        for (_, x), (_, y) in zip(a.model.named_tensors(), b.model.named_tensors()):
            np.testing.assert_array_equal(x, y)

    def test_window_mismatch(self):
        with pytest.raises(ConfigError):
            train(synthetic_samples(), TrainConfig(window=5))


class TestDlbp2:
    def test_frozen_network_fixed_point(self):
        s = synthetic_samples()
        cfg = TrainConfig(model="dlbp2", families=("lognormal",), window=4, lstm_units=(3,),
                          fc_units=(), batch_size=16, epochs=4, learning_rate=0.0, max_outer=5)
        res = train_dlbp2(s, cfg)
        mu = nw.forward_batch(s.windows, res.model).mu[:, 0]
        assert res.converged
        assert [h["iteration"] for h in res.history] == [0, 1, 2]
        assert res.history[1]["sigma"][0] == mle_sigma_lognormal(s.targets, mu)
        assert res.history[2]["change"] == 0.0

    def test_initial_sigma(self):
        cfg = TrainConfig(model="dlbp2", families=("lognormal", "weibull", "loglogistic"))
        u = initial_sigma(cfg, np.random.default_rng([0, 2]))
        assert 0 < u[0] < 1
        assert 0 < u[1] < cfg.time_unit
        assert 1 < u[2] < 2
        lit = initial_sigma(dataclasses.replace(cfg, sigma_init="literal"),
                            np.random.default_rng([0, 2]))
        assert 0 < lit[2] < 1

    def test_sigma_change(self):
        assert sigma_change([1.0, 2.0], [1.0, 2.0]) == 0.0
        assert sigma_change([1.0, 2.0], [0.0, 0.0]) == pytest.approx(2.5)

    def test_inner_default(self):
        cfg = TrainConfig(model="dlbp2", epochs=250, max_outer=20)
        assert cfg.inner == 13


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(batch_size=0), dict(epochs=0), dict(learning_rate=-1),
                                    dict(tol=0), dict(max_outer=0), dict(model="x"),
                                    dict(output_gate="relu"), dict(time_unit=0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)
