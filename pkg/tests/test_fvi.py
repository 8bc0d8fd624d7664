import csv
import dataclasses

import numpy as np
import pytest

from conftest import random_pd_cov, small_model
from funcvi import fvi
from funcvi import gradnet as gn
from funcvi import likelihoods as lk
from funcvi import toytasks as tt
from funcvi import varfam as vf
from funcvi.block_cov import GaussianBatch, cholesky_per_pixel, gaussian_kl, to_dense
from funcvi.cnngp_kernel import prior_structured_cov
from funcvi.errors import DomainError, EmptyInput, ShapeMismatch
from funcvi.oracles import central_difference, dense_kl


def batch(model, rng, B=3):
    hw = model.family.out_hw
    X = rng.random((B, 1) + hw)
    if model.is_classification:
        y = rng.integers(0, model.family.C, (B, hw[0] * hw[1]))
    else:
        y = rng.random((B, model.family.P))
    return X, y


class TestInducingInputs:
    def test_zero_noise_copies_a_member(self, rng):
        X = rng.standard_normal((4, 1, 3, 3))
        x = fvi.inducing_inputs(X, np.random.default_rng(1), noise_var=0.0)
        assert any(np.array_equal(x[0], m) for m in X)

    def test_reproducible(self, rng):
        X = rng.standard_normal((4, 1, 3, 3))
        a = fvi.inducing_inputs(X, np.random.default_rng(5))
        b = fvi.inducing_inputs(X, np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)

    def test_noise_variance(self):
        X = np.zeros((3, 1, 2, 2))
        r = np.random.default_rng(0)
        d = np.stack([fvi.inducing_inputs(X, r)[0] for _ in range(10_000)]).reshape(-1)
        se = 0.1 * np.sqrt(2 / (d.size - 1))
        assert abs(d.var() - 0.1) <= 3 * se

    def test_empty(self):
        with pytest.raises(EmptyInput):
            fvi.inducing_inputs(np.zeros((0, 1, 2, 2)), np.random.default_rng(0))


class TestKL:
    def test_value_matches_structured_kl(self, rng):
        q_cov, p_cov = random_pd_cov(rng, 3, 4), random_pd_cov(rng, 3, 4)
        mq, mp = rng.standard_normal(12), rng.standard_normal(12)
        prior = GaussianBatch(mp, p_cov)
        t = fvi.kl_tensor(gn.Tensor(mq.reshape(3, 4)), gn.Tensor(q_cov.blocks), prior)
        assert float(t.value) == pytest.approx(gaussian_kl(GaussianBatch(mq, q_cov), prior), rel=1e-12)

    def test_gradients_match_dense_oracle(self, rng):
        q_cov, p_cov = random_pd_cov(rng, 2, 3), random_pd_cov(rng, 2, 3)
        mq, mp = rng.standard_normal((2, 3)), rng.standard_normal(6)
        blocks = q_cov.blocks.copy()
        m, c = gn.param(mq), gn.param(blocks)
        fvi.kl_tensor(m, c, GaussianBatch(mp, p_cov)).backward()

        def value():
            sym = vf.StructuredCov(0.5 * (blocks + blocks.transpose(1, 0, 2)))
            return dense_kl(mq.reshape(-1), to_dense(sym), mp, to_dense(p_cov))

        np.testing.assert_allclose(m.grad.reshape(-1), central_difference(value, mq, range(6)), rtol=1e-6)
        # symmetric perturbations: an off-diagonal entry moves both (i, j) and (j, i)
        g = c.grad
        fd = central_difference(value, blocks, range(blocks.size))
        np.testing.assert_allclose(0.5 * (g + g.transpose(1, 0, 2)).reshape(-1), fd, rtol=1e-5, atol=1e-9)

    def test_pinned_to_prior_is_zero(self, rng):
        arch = tt.prior_arch_image((1, 4, 4))
        X = rng.random((3, 1, 4, 4))
        prior = prior_structured_cov(arch, X)
        L = 5
        kern = prior.cov.blocks.copy()
        kern[np.arange(3), np.arange(3)] -= arch.noise_var
        A = cholesky_per_pixel(vf.StructuredCov(kern + 1e-12 * np.eye(3)[:, :, None]))   # (P, B, B)
        feats = np.zeros((3, L, 16))
        feats[:, :3, :] = np.sqrt(L) * A.transpose(1, 2, 0)
        heads = vf.VarHeads(prior.mean.reshape(3, 16), feats, np.full((3, 16), arch.noise_var), np.ones((3, 16)))
        kl = fvi.kl_tensor(gn.Tensor(heads.mean), vf.q_cov_tensor(heads), prior)
        assert abs(float(kl.value)) < 1e-8


class TestObjective:
    def test_zero_data_weight_leaves_negative_kl(self, rng):
        model = small_model()
        X, y = batch(model, rng)
        Xi = fvi.inducing_inputs(X, rng)
        parts = fvi.fvi_objective(model, X, y, Xi, fvi.TrainConfig(), 0, np.random.default_rng(0))
        assert parts.data_term == 0.0
        assert float(parts.objective.value) == pytest.approx(-parts.kl)
        assert parts.kl >= 0

    def test_data_scaling_is_linear(self, rng):
        model = small_model("laplace")
        X, y = batch(model, rng)
        Xi = fvi.inducing_inputs(X, rng)
        cfg = fvi.TrainConfig(likelihood="laplace")
        a = fvi.fvi_objective(model, X, y, Xi, cfg, 30, np.random.default_rng(2))
        b = fvi.fvi_objective(model, X, y, Xi, cfg, 60, np.random.default_rng(2))
        assert b.data_term == 2 * a.data_term
        assert b.kl == a.kl
        off = fvi.fvi_objective(model, X, y, Xi, dataclasses.replace(cfg, data_scale=False), 60,
                                np.random.default_rng(2))
        assert off.data_term * 20 == pytest.approx(b.data_term, rel=1e-12)

    def test_gaussian_mc_matches_closed_form(self, rng):
        model = small_model()
        X, y = batch(model, rng, B=2)
        heads = model.family.split(model.family.net.apply({k: gn.Tensor(v) for k, v in model.family.params.items()}, X))
        closed = float(fvi._gaussian_closed_data_term(heads, y).value)
        S = 10_000
        r = np.random.default_rng(3)
        f = vf.rsample_q(heads.numpy(), r.standard_normal((S, 4, 16)), r.standard_normal((S, 2, 16)))
        per_sample = lk.location_scale_logpdf(lk.LikelihoodFamily.gaussian(), y, f, heads.scale.value).sum(axis=(1, 2))
        mc = float(fvi._regression_data_term(lk.LikelihoodFamily.gaussian(), heads, y, gn.Tensor(f)).value)
        assert mc == pytest.approx(per_sample.mean(), rel=1e-10)
        assert abs(mc - closed) <= 3 * per_sample.std() / np.sqrt(S)

    @pytest.mark.parametrize("lik", ["gaussian", "laplace", "berhu", "boltzmann"])
    def test_gradients_match_finite_differences(self, lik, rng):
        model = small_model(lik)
        X, y = batch(model, rng)
        if lik == "boltzmann":
            y[0, 0] = fvi.IGNORE_LABEL
        Xi = fvi.inducing_inputs(X, rng)
        cfg = fvi.TrainConfig(mc_samples=3, likelihood=lik)
        c = 0.3 if lik == "berhu" else None
        params = model.family.params
        parts, grads = fvi.objective_and_grads(model, X, y, Xi, cfg, 40, np.random.default_rng(7), c=c)

        def value():
            return float(fvi.fvi_objective(model, X, y, Xi, cfg, 40, np.random.default_rng(7), c=c).objective.value)

        pick = np.random.default_rng(1)
        for name in params:
            coords = pick.choice(params[name].size, min(5, params[name].size), replace=False)
            fd = central_difference(value, params[name], coords, h=1e-5)
            a = grads[name].reshape(-1)[coords]
            rel = np.abs(a - fd) / np.maximum(np.maximum(np.abs(a), np.abs(fd)), 1e-8)
            assert rel.max() < 1e-4, (name, rel.max())

    def test_berhu_threshold_rule(self, rng):
        model = small_model("berhu")
        X, y = batch(model, rng)
        cfg = fvi.TrainConfig(likelihood="berhu", mc_samples=5)
        parts = fvi.fvi_objective(model, X, y, X[:0], cfg, 10, np.random.default_rng(4))
        h = model.family.heads(X)
        r = np.random.default_rng(4)
        f = vf.rsample_q(h, r.standard_normal((5, 4, 16)), r.standard_normal((5, 3, 16)))
        expected = lk.clamp_threshold(np.abs(y - f).mean(axis=0).max() / 5)
        assert parts.c_threshold == pytest.approx(expected, rel=1e-12)

    def test_duplicates_rejected_without_prior_noise(self, rng):
        model = small_model()
        model.prior = dataclasses.replace(model.prior, noise_var=0.0)
        X, y = batch(model, rng, B=2)
        with pytest.raises(DomainError):
            fvi.fvi_objective(model, X, y, X[:1], fvi.TrainConfig(), 2, np.random.default_rng(0))

    def test_shape_checks(self, rng):
        model = small_model()
        X, y = batch(model, rng)
        with pytest.raises(ShapeMismatch):
            fvi.fvi_objective(model, X, y[:2], X[:1], fvi.TrainConfig(), 3, rng)
        with pytest.raises(ShapeMismatch):
            fvi.FviModel(model.family, tt.prior_arch_image((1, 5, 5)))


def train_1d(n=96, epochs=3, seed=0, lr=1e-2, **kw):
    ds = tt.gen_regression_1d(n, seed=0)
    fam = vf.VarFamily(tt.var_net_1d(4, hidden=16, seed=seed), 1, (1, 1), L=4)
    model = fvi.FviModel(fam, tt.prior_arch_1d())
    cfg = fvi.TrainConfig(batch_size=16, epochs=epochs, lr=lr, seed=seed, grad_clip=10.0, **kw)
    return ds, model, fvi.train(model, ds.X_train, ds.y_train, cfg)


class TestTrain:
    def test_zero_lr_keeps_parameters(self):
        ds = tt.gen_regression_1d(40, seed=0)
        fam = vf.VarFamily(tt.var_net_1d(4, hidden=8), 1, (1, 1), L=4)
        before = {k: v.copy() for k, v in fam.params.items()}
        res = fvi.train(fvi.FviModel(fam, tt.prior_arch_1d()), ds.X_train, ds.y_train,
                        fvi.TrainConfig(batch_size=8, epochs=2, lr=0.0))
        assert len(res.log) == 2
        for k in before:
            np.testing.assert_array_equal(fam.params[k], before[k])

    def test_deterministic_logs(self):
        _, _, a = train_1d()
        _, _, b = train_1d()
        assert a.log == b.log

    def test_objective_improves(self):
        _, _, res = train_1d(n=128, epochs=30)
        assert res.log[-1]["objective"] > res.log[0]["objective"]

    def test_log_csv(self, tmp_path):
        ds = tt.gen_regression_1d(32, seed=0)
        fam = vf.VarFamily(tt.var_net_1d(4, hidden=8), 1, (1, 1), L=4)
        model = fvi.FviModel(fam, tt.prior_arch_1d(), likelihood="berhu")
        path = tmp_path / "log.csv"
        fvi.train(model, ds.X_train, ds.y_train,
                  fvi.TrainConfig(batch_size=8, epochs=2, likelihood="berhu"), log_path=path)
        rows = list(csv.reader(open(path)))
        assert rows[0] == list(fvi.LOG_COLUMNS)
        assert len(rows) == 3
        assert float(rows[-1][-1]) == model.c_threshold > 0

    def test_empty_dataset(self):
        fam = vf.VarFamily(tt.var_net_1d(4, hidden=8), 1, (1, 1), L=4)
        with pytest.raises(EmptyInput):
            fvi.train(fvi.FviModel(fam, tt.prior_arch_1d()), np.zeros((0, 1, 1, 8)), np.zeros((0, 1)),
                      fvi.TrainConfig())


def pin_output(model, mean, feat=0.0, diag=-60.0, scale=1.0):
    fam = model.family
    k = max(int(n.split(".")[0]) for n in fam.params)
    w, b = fam.params[f"{k}.w"], fam.params[f"{k}.b"]
    w[:] = 0.0
    n = b.size // (fam.L + 3)
    b[:n] = mean
    b[n:-2 * n] = feat
    b[-2 * n:-n] = diag
    b[-n:] = gn.softplus_inverse(scale - vf.SCALE_FLOOR)


class TestPredict:
    def test_zero_epistemic_unit_sigma(self, rng):
        model = small_model(jitter_params=0.0)
        model.family.jitter = 0.0
        pin_output(model, 0.3)
        pm = fvi.predict(model, rng.random((2, 1, 4, 4)))
        np.testing.assert_allclose(pm.total_var, 1.0, atol=1e-12)
        np.testing.assert_allclose(pm.mean, 0.3)

    def test_berhu_aleatoric_weight(self, rng):
        model = small_model("berhu", jitter_params=0.0)
        model.c_threshold = 0.7
        pin_output(model, 0.0, scale=2.0)
        pm = fvi.predict(model, rng.random((1, 1, 4, 4)))
        np.testing.assert_allclose(pm.aleatoric_var, 4 * lk.berhu_w(0.7), rtol=1e-10)

    def test_large_logit_gap_has_zero_entropy(self, rng):
        model = small_model("boltzmann", jitter_params=0.0)
        pin_output(model, 0.0)
        k = max(int(n.split(".")[0]) for n in model.family.params)
        model.family.params[f"{k}.b"][0] = 1e3
        pred = fvi.predict(model, rng.random((2, 1, 4, 4)))
        assert pred.entropy.max() < 1e-12
        assert np.all(pred.labels == 0)
        np.testing.assert_allclose(pred.probs.sum(axis=1), 1.0)

    def test_single_forward_pass(self, rng):
        for lik in ("gaussian", "boltzmann"):
            model = small_model(lik)
            before = model.family.net.forward_count
            fvi.predict(model, rng.random((5, 1, 4, 4)))
            assert model.family.net.forward_count - before == 5

    def test_prediction_csv(self, rng, tmp_path):
        model = small_model()
        pm = fvi.predict(model, rng.random((2, 1, 4, 4)))
        fvi.write_predictions_csv(pm, tmp_path / "p.csv")
        rows = list(csv.reader(open(tmp_path / "p.csv")))
        assert rows[0] == ["index", "mean", "epistemic_var", "aleatoric_var"]
        assert len(rows) == 33 and float(rows[5][1]) == pm.mean.reshape(-1)[4]
        model = small_model("boltzmann")
        pr = fvi.predict(model, rng.random((1, 1, 4, 4)))
        fvi.write_predictions_csv(pr, tmp_path / "c.csv")
        rows = list(csv.reader(open(tmp_path / "c.csv")))
        assert rows[0] == ["index", "class", "prob", "entropy"] and len(rows) == 1 + 16 * 3
