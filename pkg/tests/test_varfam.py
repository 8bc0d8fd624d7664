import numpy as np
import pytest

from funcvi import gradnet as gn
from funcvi import varfam as vf
from funcvi.block_cov import per_pixel_view
from funcvi.errors import ShapeMismatch
from funcvi.oracles import central_difference


def random_heads(rng, B=3, L=4, P=5, d_low=0.2):
    return vf.VarHeads(rng.standard_normal((B, P)), rng.standard_normal((B, L, P)),
                       rng.uniform(d_low, 1.0, (B, P)), rng.uniform(0.5, 1.0, (B, P)))


def dense_family(L=5, P=1, seed=0):
    net = gn.Net([gn.Dense(8), gn.Act(), gn.Dense((L + 3) * P)], (1, 1, 4), seed=seed)
    return vf.VarFamily(net, 1, (1, P), L=L)


class TestQCov:
    def test_zero_features_diagonal(self, rng):
        h = random_heads(rng)
        h.features = np.zeros_like(h.features)
        K = vf.q_cov(h)
        expected = np.zeros((3, 3, 5))
        expected[np.arange(3), np.arange(3)] = h.diag
        np.testing.assert_array_equal(K.blocks, expected)

    def test_rank_one_all_ones(self):
        h = vf.VarHeads(np.zeros((2, 1)), np.ones((2, 1, 1)), np.zeros((2, 1)), np.ones((2, 1)))
        np.testing.assert_allclose(per_pixel_view(vf.q_cov(h))[0], np.ones((2, 2)))

    def test_eigenvalues_bounded_by_diag(self, rng):
        for _ in range(20):
            h = random_heads(rng, B=int(rng.integers(1, 6)), L=int(rng.integers(1, 5)))
            w = np.linalg.eigvalsh(per_pixel_view(vf.q_cov(h)))
            assert w.min() >= h.diag.min() - 1e-9

    def test_matches_dense_formula(self, rng):
        h = random_heads(rng, B=2, L=3, P=2)
        K = vf.q_cov(h)
        i, j, p = 0, 1, 1
        assert K.blocks[i, j, p] == pytest.approx(np.dot(h.features[i, :, p], h.features[j, :, p]) / 3)
        assert K.blocks[0, 0, 0] == pytest.approx(np.sum(h.features[0, :, 0] ** 2) / 3 + h.diag[0, 0])

    def test_tensor_version_agrees(self, rng):
        h = random_heads(rng)
        t = vf.VarHeads(*(gn.Tensor(a) for a in (h.mean, h.features, h.diag, h.scale)))
        np.testing.assert_allclose(vf.q_cov_tensor(t).value, vf.q_cov(h).blocks, atol=1e-14)

    def test_marginal_var(self, rng):
        h = random_heads(rng)
        np.testing.assert_allclose(h.marginal_var(), vf.q_cov(h).blocks[np.arange(3), np.arange(3)])


class TestFamily:
    def test_untrained_model_is_finite_and_pd(self, rng):
        fam = dense_family()
        X = rng.standard_normal((4, 1, 1, 4))
        q, scale = vf.q_at(fam, X)
        assert np.all(np.isfinite(q.mean)) and np.all(scale > 0)
        assert np.linalg.eigvalsh(per_pixel_view(q.cov)).min() > 0

    def test_initial_scale(self, rng):
        fam = dense_family()
        _, scale = vf.q_at(fam, rng.standard_normal((3, 1, 1, 4)))
        np.testing.assert_allclose(scale, 0.5)

    def test_permutation_equivariance(self, rng):
        fam = dense_family(P=1)
        X = rng.standard_normal((4, 1, 1, 4))
        perm = np.array([2, 0, 3, 1])
        q, _ = vf.q_at(fam, X)
        qp, _ = vf.q_at(fam, X[perm])
        np.testing.assert_allclose(qp.cov.blocks, q.cov.blocks[perm][:, perm], atol=1e-13)
        np.testing.assert_allclose(qp.mean, q.mean[perm], atol=1e-13)

    def test_single_input(self, rng):
        fam = dense_family(L=3, P=2)
        h = fam.heads(rng.standard_normal((1, 1, 1, 4)))
        q, _ = vf.q_at(fam, rng.standard_normal((1, 1, 1, 4)))
        assert q.cov.blocks.shape == (1, 1, 2)
        np.testing.assert_allclose(h.marginal_var()[0], (h.features[0] ** 2).sum(0) / 3 + h.diag[0])

    def test_identical_inputs_differ_only_on_true_diagonal(self, rng):
        fam = dense_family()
        x = rng.standard_normal((1, 1, 1, 4))
        q, _ = vf.q_at(fam, np.concatenate([x, x]))
        h = fam.heads(x)
        assert q.cov.blocks[0, 0, 0] - q.cov.blocks[0, 1, 0] == pytest.approx(h.diag[0, 0])

    def test_head_count_checked(self):
        net = gn.Net([gn.Dense(7)], (1, 1, 4))
        with pytest.raises(ShapeMismatch):
            vf.VarFamily(net, 1, (1, 1), L=5)

    def test_jitter_floor(self, rng):
        fam = dense_family()
        k = max(int(n.split(".")[0]) for n in fam.params)
        fam.params[f"{k}.b"][:] = -50.0
        fam.params[f"{k}.w"][:] = 0.0
        h = fam.heads(rng.standard_normal((2, 1, 1, 4)))
        np.testing.assert_allclose(h.diag, vf.DEFAULT_JITTER, rtol=1e-12)


class TestRsample:
    def test_zero_noise_gives_mean(self, rng):
        h = random_heads(rng)
        f = vf.rsample_q(h, np.zeros((2, 4, 5)), np.zeros((2, 3, 5)))
        np.testing.assert_array_equal(f, np.broadcast_to(h.mean, f.shape))

    def test_empirical_covariance(self, rng):
        h = random_heads(rng, B=2, L=3, P=2)
        S = 100_000
        f = vf.rsample_q(h, rng.standard_normal((S, 3, 2)), rng.standard_normal((S, 2, 2)))
        K = vf.q_cov(h).blocks
        var = f.var(axis=0)
        # var of a sample variance of a gaussian is 2 sigma^4 / (S - 1)
        se = np.sqrt(2 / (S - 1)) * K[[0, 1], [0, 1]]
        assert np.all(np.abs(var - K[[0, 1], [0, 1]]) <= 3 * se)
        cross = np.mean((f[:, 0] - f[:, 0].mean(0)) * (f[:, 1] - f[:, 1].mean(0)), axis=0)
        assert np.all(np.abs(cross - K[0, 1]) <= 5 * np.sqrt((K[0, 0] * K[1, 1] + K[0, 1] ** 2) / S))

    def test_shape_checks(self, rng):
        h = random_heads(rng)
        with pytest.raises(ShapeMismatch):
            vf.rsample_q(h, np.zeros((1, 3, 5)), np.zeros((1, 3, 5)))

    def test_gradient_of_second_moment_wrt_diag(self, rng):
        h = random_heads(rng, B=2, L=2, P=3)
        ef, ed = rng.standard_normal((7, 2, 3)), rng.standard_normal((7, 2, 3))
        D = h.diag.copy()

        def value():
            return float(np.mean(vf.rsample_q(vf.VarHeads(h.mean, h.features, D, h.scale), ef, ed) ** 2))

        Dt = gn.param(D)
        t = vf.VarHeads(gn.Tensor(h.mean), gn.Tensor(h.features), Dt, gn.Tensor(h.scale))
        gn.square(vf.rsample_q(t, ef, ed)).mean().backward()
        fd = central_difference(value, D, np.arange(D.size))
        np.testing.assert_allclose(Dt.grad.reshape(-1), fd, rtol=1e-6, atol=1e-9)
