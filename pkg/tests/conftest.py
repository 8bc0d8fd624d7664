import numpy as np
import pytest

from funcvi.block_cov import StructuredCov


def random_pd_cov(rng, B, P, ridge=0.5):
    """Random StructuredCov whose per-pixel matrices are A A^T + ridge*I."""
    A = rng.standard_normal((P, B, B))
    mats = A @ A.transpose(0, 2, 1) + ridge * np.eye(B)
    return StructuredCov.from_per_pixel(mats)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def small_model(likelihood="gaussian", L=4, hw=4, hidden=6, seed=1, jitter_params=0.05):
    """A tiny image model with randomised biases (no dead-relu kinks at init)."""
    from funcvi import fvi, toytasks as tt, varfam as vf

    K = 3 if likelihood == "boltzmann" else 1
    task = vf.CLASSIFICATION if K == 3 else vf.REGRESSION
    net = tt.var_net_image(L, K, input_shape=(1, hw, hw), hidden=hidden, seed=seed)
    fam = vf.VarFamily(net, K, (hw, hw), L=L, task=task)
    r = np.random.default_rng(seed + 100)
    for k, v in net.params.items():
        net.params[k] = v + r.normal(0.0, jitter_params, v.shape)
    prior = tt.prior_arch_image((1, hw, hw), prior_mean=1.0 if K == 3 else 0.5)
    return fvi.FviModel(fam, prior, likelihood=likelihood)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
