"""Variational multi-output GP parametrized by a network.

For an input x the network emits ``(L + 3) * C`` output maps, grouped as

    [ mean (C) | features g_1..g_L (L*C) | diagonal (C) | scale (C) ]

Each group is flattened channel-major to length ``P = C * H * W``.  Over a
batch the covariance is

    Sigma(x_i, x_j)[p] = (1/L) sum_k g_k(x_i)[p] g_k(x_j)[p] + D(x_i)[p] [i == j]

which is a StructuredCov with PSD per-pixel matrices by construction.  The
diagonal and scale heads pass through softplus; the diagonal additionally
carries a constant jitter.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradnet as gn
from .block_cov import GaussianBatch, StructuredCov
from .errors import ShapeMismatch

REGRESSION, CLASSIFICATION = "regression", "classification"
DEFAULT_L = 20
DEFAULT_JITTER = 1e-3
SCALE_FLOOR = 1e-4


def _val(x):
    return x.value if isinstance(x, gn.Tensor) else np.asarray(x, dtype=float)


@dataclass
class VarHeads:
    """Per-input head outputs; fields are arrays or autodiff Tensors.

    mean (B, P), features (B, L, P), diag (B, P), scale (B, P).  ``scale`` is
    sigma for regression and the per-class logit scale sigma^2 for
    classification.
    """
    mean: object
    features: object
    diag: object
    scale: object

    @property
    def L(self) -> int:
        return _val(self.features).shape[1]

    def numpy(self) -> "VarHeads":
        return VarHeads(_val(self.mean), _val(self.features), _val(self.diag), _val(self.scale))

    def marginal_var(self):
        """Diagonal of the covariance, (B, P)."""
        return (_val(self.features) ** 2).sum(axis=1) / self.L + _val(self.diag)


def q_cov(heads: VarHeads) -> StructuredCov:
    g, D = _val(heads.features), _val(heads.diag)
    if g.ndim != 3 or g.shape[1] < 1:
        raise ShapeMismatch("features must have shape (B, L, P) with L >= 1")
    blocks = np.einsum("ikp,jkp->ijp", g, g) / g.shape[1]
    idx = np.arange(g.shape[0])
    blocks[idx, idx] += D
    # einsum is not guaranteed bit-symmetric
    return StructuredCov(0.5 * (blocks + blocks.transpose(1, 0, 2)))


def q_cov_tensor(heads: VarHeads) -> gn.Tensor:
    """Differentiable (B, B, P) covariance blocks."""
    g = gn._lift(heads.features)
    gram = gn.einsum2("ikp,jkp->ijp", g, g) * (1.0 / g.shape[1])
    return gram + gn.diag_embed(gn._lift(heads.diag))


def rsample_q(heads: VarHeads, eps_features, eps_diag):
    """Reparametrized joint samples over the batch, shape (S, B, P).

    ``eps_features`` (S, L, P) is shared by all inputs of the batch and
    ``eps_diag`` (S, B, P) is per input, so
    ``f = mean + L^{-1/2} sum_k eps_k * g_k + sqrt(D) * eps'`` has exactly the
    covariance of :func:`q_cov`.  Returns a Tensor when the heads are Tensors.
    """
    eps_features = np.asarray(eps_features, dtype=float)
    eps_diag = np.asarray(eps_diag, dtype=float)
    B, L, P = _val(heads.features).shape
    if eps_features.shape[1:] != (L, P) or eps_diag.shape[1:] != (B, P):
        raise ShapeMismatch("noise shapes must be (S, L, P) and (S, B, P)")
    if isinstance(heads.mean, gn.Tensor):
        low = gn.einsum2("skp,bkp->sbp", gn.Tensor(eps_features), heads.features) * (1.0 / np.sqrt(L))
        return heads.mean + low + gn.sqrt(heads.diag) * eps_diag
    low = np.einsum("skp,bkp->sbp", eps_features, _val(heads.features)) / np.sqrt(L)
    return _val(heads.mean) + low + np.sqrt(_val(heads.diag)) * eps_diag


class VarFamily:
    """A network together with the head layout that turns it into q(f).

    ``net`` must map a (C_in, H_in, W_in) input either to ``(L+3)*C`` conv
    maps of size ``out_hw`` or (for dense heads) to ``(L+3)*C*H*W`` values.
    """

    def __init__(self, net: gn.Net, n_channels: int, out_hw, L: int = DEFAULT_L,
                 task: str = REGRESSION, jitter: float = DEFAULT_JITTER, init_scale: float | None = None,
                 head_gain: float = 0.1):
        if L < 1:
            raise ValueError("L must be at least 1")
        if task not in (REGRESSION, CLASSIFICATION):
            raise ValueError(f"unknown task '{task}'")
        self.net, self.C, self.out_hw = net, int(n_channels), tuple(out_hw)
        self.L, self.task, self.jitter = int(L), task, float(jitter)
        self.P = self.C * self.out_hw[0] * self.out_hw[1]
        if int(np.prod(net.output_shape)) != (self.L + 3) * self.P:
            raise ShapeMismatch(f"network emits {net.output_shape}, heads need {(self.L + 3) * self.P} values")
        if init_scale is None:
            init_scale = 0.5 if task == REGRESSION else 1.0
        self._init_output_layer(init_scale, head_gain)

    def _init_output_layer(self, scale: float, gain: float):
        # shrink the output layer so the initial q is close to a small
        # diagonal Gaussian, and start the scale head exactly at ``scale``
        k = max(int(name.split(".")[0]) for name in self.net.params)
        w, b = self.net.params[f"{k}.w"], self.net.params[f"{k}.b"]
        w *= gain
        n = b.size // (self.L + 3)
        if w.ndim == 2:
            w[:, -n:] = 0.0
        else:
            w[-n:] = 0.0
        b[-n:] = gn.softplus_inverse(scale - SCALE_FLOOR)

    @property
    def params(self) -> dict:
        return self.net.params

    @params.setter
    def params(self, value: dict):
        self.net.params = value

    def split(self, out) -> VarHeads:
        """Turn raw network output (Tensor) into linked heads."""
        out = gn._lift(out)
        B = out.shape[0]
        flat = out.reshape(B, self.L + 3, self.P)
        mean = flat[:, 0]
        feats = flat[:, 1:self.L + 1]
        diag = gn.softplus(flat[:, self.L + 1]) + self.jitter
        scale = gn.softplus(flat[:, self.L + 2]) + SCALE_FLOOR
        return VarHeads(mean, feats, diag, scale)

    def heads(self, X, params: dict | None = None) -> VarHeads:
        """Heads at a batch; Tensors tracking ``params`` when given, arrays otherwise."""
        if params is None:
            const = {k: gn.Tensor(v) for k, v in self.net.params.items()}
            return self.split(self.net.apply(const, X)).numpy()
        return self.split(self.net.apply(params, X))


def q_at(family: VarFamily, X) -> tuple[GaussianBatch, np.ndarray]:
    """q(f^X) as a GaussianBatch, plus the (B, P) scale heads."""
    h = family.heads(X)
    return GaussianBatch(h.mean.reshape(-1), q_cov(h)), h.scale
