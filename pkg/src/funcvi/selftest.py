"""Oracle checks run by ``funcvi selftest``.

Each check compares a library path with an independent reference and returns
a :class:`Check`.  They are sized to finish in well under a minute together.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import block_cov as bc
from . import fvi
from . import gradnet as gn
from . import likelihoods as lk
from . import oracles
from . import toytasks as tt
from . import varfam as vf
from .cnngp_kernel import equivalent_kernel, resolution_schedule_arch


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


def _random_cov(rng, B, P):
    A = rng.standard_normal((P, B, B))
    return bc.StructuredCov.from_per_pixel(A @ A.transpose(0, 2, 1) + 0.5 * np.eye(B))


def check_inverse(rng) -> Check:
    err = rel = 0.0
    for _ in range(20):
        K = _random_cov(rng, int(rng.integers(1, 6)), int(rng.choice([1, 4, 16])))
        inv, ld = bc.inverse_and_logdet(K)
        dense = bc.to_dense(K)
        err = max(err, float(np.abs(bc.to_dense(inv) - oracles.dense_inverse(dense)).max()))
        ref = oracles.dense_logdet(dense)
        rel = max(rel, abs(ld - ref) / max(1.0, abs(ref)))
    return Check("structured inverse/logdet vs dense", err <= 1e-8 and rel <= 1e-6,
                 f"max abs err {err:.1e}, logdet rel err {rel:.1e}")


def check_kl(rng) -> Check:
    err, low = 0.0, math.inf
    for _ in range(10):
        B, P = int(rng.integers(1, 5)), int(rng.choice([1, 3, 8]))
        q = bc.GaussianBatch(rng.standard_normal(B * P), _random_cov(rng, B, P))
        p = bc.GaussianBatch(rng.standard_normal(B * P), _random_cov(rng, B, P))
        kl = bc.gaussian_kl(q, p)
        ref = oracles.dense_kl(q.mean, bc.to_dense(q.cov), p.mean, bc.to_dense(p.cov))
        err, low = max(err, abs(kl - ref)), min(low, kl)
    return Check("Gaussian KL vs dense", err <= 1e-8 and low >= -1e-9, f"max err {err:.1e}, min KL {low:.2e}")


def check_berhu() -> Check:
    err = 0.0
    for c in (0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 30.0):
        loss = lambda t, c=c: float(lk.berhu_loss(t, c))
        z0, _ = oracles.integrate_real_line(lambda t: math.exp(-loss(t)), breakpoints=(-c, 0.0, c))
        m2, _ = oracles.integrate_real_line(lambda t: t * t * math.exp(-loss(t)), breakpoints=(-c, 0.0, c))
        err = max(err, abs(lk.berhu_log_z0(c) - math.log(z0)), abs(lk.berhu_w(c) - m2 / z0))
    return Check("berHu normalizer and variance vs quadrature", err <= 1e-8, f"max err {err:.1e}")


def check_densities() -> Check:
    err = 0.0
    for fam in (lk.LikelihoodFamily.gaussian(), lk.LikelihoodFamily.laplace(), lk.LikelihoodFamily.berhu(0.7)):
        mass, _ = oracles.integrate_real_line(
            lambda t, fam=fam: math.exp(float(lk.location_scale_logpdf(fam, t, 0.3, 1.7))),
            breakpoints=(0.3 - 1.7 * 0.7, 0.3, 0.3 + 1.7 * 0.7))
        err = max(err, abs(mass - 1.0))
    return Check("location-scale densities integrate to 1", err <= 1e-6, f"max err {err:.1e}")


def check_kernel(rng) -> Check:
    arch = resolution_schedule_arch((1, 4, 4), fractions=(0.5, 1.0))
    X = rng.random((2, 1, 4, 4))
    mc = oracles.mc_kernel(arch, X, channels=256, n_draws=150, seed=int(rng.integers(1 << 30)))
    exact = equivalent_kernel(arch, X[0], X[1]).reshape(-1)
    rel = float(np.abs(mc[0, 1] / exact - 1).max())
    return Check("CNN-GP kernel vs finite-width Monte Carlo", rel <= 0.05, f"max rel err {rel:.3f}")


def check_autodiff(rng) -> Check:
    x, w, b = rng.standard_normal((2, 2, 4, 4)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    weights = rng.standard_normal((2, 3, 4, 4))
    tw = gn.param(w)
    (gn.conv2d(gn.Tensor(x), tw, gn.Tensor(b)) * weights).sum().backward()
    fd = oracles.central_difference(
        lambda: float(np.sum(gn.conv2d(gn.Tensor(x), gn.Tensor(w), gn.Tensor(b)).value * weights)),
        w, range(w.size), h=1e-6)
    err = float(np.abs(tw.grad.reshape(-1) - fd).max())
    return Check("autodiff convolution vs finite differences", err <= 1e-6, f"max err {err:.1e}")


def _tiny_model(lik, rng):
    K = 3 if lik == lk.BOLTZMANN else 1
    net = tt.var_net_image(3, K, input_shape=(1, 4, 4), hidden=4, seed=int(rng.integers(1000)))
    for k, v in net.params.items():
        net.params[k] = v + rng.normal(0, 0.05, v.shape)
    fam = vf.VarFamily(net, K, (4, 4), L=3, task=vf.CLASSIFICATION if K == 3 else vf.REGRESSION)
    return fvi.FviModel(fam, tt.prior_arch_image((1, 4, 4), prior_mean=1.0 if K == 3 else 0.5), likelihood=lik)


def check_objective_gradients(rng) -> Check:
    worst = 0.0
    for lik in (lk.GAUSSIAN, lk.LAPLACE, lk.BERHU, lk.BOLTZMANN):
        model = _tiny_model(lik, rng)
        X = rng.random((2, 1, 4, 4))
        y = rng.integers(0, 3, (2, 16)) if lik == lk.BOLTZMANN else rng.random((2, 16))
        Xi = fvi.inducing_inputs(X, rng)
        cfg = fvi.TrainConfig(mc_samples=2, likelihood=lik)
        c = 0.4 if lik == lk.BERHU else None
        _, grads = fvi.objective_and_grads(model, X, y, Xi, cfg, 20, np.random.default_rng(1), c=c)
        f = lambda: float(fvi.fvi_objective(model, X, y, Xi, cfg, 20, np.random.default_rng(1), c=c).objective.value)
        for name, p in model.family.params.items():
            coords = rng.choice(p.size, min(3, p.size), replace=False)
            fd = oracles.central_difference(f, p, coords, h=1e-5)
            a = grads[name].reshape(-1)[coords]
            worst = max(worst, float((np.abs(a - fd) / np.maximum(np.maximum(np.abs(a), np.abs(fd)), 1e-8)).max()))
    return Check("objective gradients vs finite differences", worst <= 1e-4, f"max rel err {worst:.1e}")


def check_qcov(rng) -> Check:
    low = math.inf
    for _ in range(10):
        B, L, P = int(rng.integers(1, 6)), int(rng.integers(1, 5)), 6
        D = rng.uniform(0.1, 1.0, (B, P))
        h = vf.VarHeads(np.zeros((B, P)), rng.standard_normal((B, L, P)), D, np.ones((B, P)))
        low = min(low, float((np.linalg.eigvalsh(bc.per_pixel_view(vf.q_cov(h))).min(axis=1) - D.min(axis=0)).min()))
    return Check("variational covariance eigenvalues >= diagonal", low >= -1e-9, f"min margin {low:.1e}")


def run_all(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    checks = [check_inverse, check_kl, check_berhu, check_densities, check_kernel,
              check_autodiff, check_objective_gradients, check_qcov]
    out = []
    for fn in checks:
        try:
            out.append(fn(rng) if fn.__code__.co_argcount else fn())
        except Exception as exc:        # a crashing oracle is a failed check
            out.append(Check(fn.__name__, False, f"{type(exc).__name__}: {exc}"))
    return out
