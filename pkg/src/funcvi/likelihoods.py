"""Likelihood families built from losses.

A loss ``l`` defines the Gibbs density ``exp(-l(y)) / Z``.  For regression the
standardized loss is applied to ``(y - f) / sigma``, which gives a
location-scale family with normalizer ``sigma * Z0``.  Classification uses a
softmax over logits divided by per-class scales.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.special import erfc, logsumexp

from .errors import DomainError, EmptyInput, NonFinite

GAUSSIAN, LAPLACE, BERHU, BOLTZMANN = "gaussian", "laplace", "berhu", "boltzmann"
C_MIN = 1e-3
LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


def _phi_neg_sqrt(c):
    """Phi(-sqrt(c)) through erfc, accurate for large c."""
    return 0.5 * erfc(np.sqrt(c) / math.sqrt(2.0))


def _check_c(c):
    c = np.asarray(c, dtype=float)
    if np.any(c <= 0):
        raise DomainError("berHu threshold c must be positive")
    return c


def berhu_loss(y, c: float = 1.0):
    y = np.asarray(y, dtype=float)
    a = np.abs(y)
    return np.where(a <= c, a, (y * y + c * c) / (2 * c))


def berhu_z0(c):
    c = _check_c(c)
    return 2.0 * (-np.expm1(-c) + np.exp(-c / 2) * np.sqrt(2 * np.pi * c) * _phi_neg_sqrt(c))


def berhu_log_z0(c):
    out = np.log(berhu_z0(c))
    return float(out) if np.ndim(out) == 0 else out


def berhu_w(c):
    """Variance of the unit-scale berHu density."""
    c = _check_c(c)
    num = (-4 * (c + 1) * np.exp(-c) + 4
           + 2 * np.exp(-c / 2) * np.sqrt(2 * np.pi) * c ** 1.5 * _phi_neg_sqrt(c))
    out = num / berhu_z0(c)
    return float(out) if np.ndim(out) == 0 else out


def berhu_threshold(expected_abs_residuals) -> float:
    """One fifth of the largest expected absolute residual (not floored)."""
    r = np.asarray(expected_abs_residuals, dtype=float).reshape(-1)
    if r.size == 0:
        raise EmptyInput("no residuals to choose a threshold from")
    if np.any(r < 0):
        raise DomainError("expected absolute residuals must be non-negative")
    return float(r.max() / 5.0)


def clamp_threshold(c: float) -> float:
    return max(float(c), C_MIN)


@dataclass(frozen=True)
class LikelihoodFamily:
    tag: str
    c: float | None = None
    n_classes: int | None = None

    def __post_init__(self):
        if self.tag not in (GAUSSIAN, LAPLACE, BERHU, BOLTZMANN):
            raise ValueError(f"unknown likelihood '{self.tag}'")
        if self.tag == BERHU and (self.c is None or self.c <= 0):
            raise DomainError("berHu family needs a positive threshold c")
        if self.tag == BOLTZMANN and (self.n_classes is None or self.n_classes < 2):
            raise ValueError("Boltzmann family needs n_classes >= 2")

    @classmethod
    def gaussian(cls):
        return cls(GAUSSIAN)

    @classmethod
    def laplace(cls):
        return cls(LAPLACE)

    @classmethod
    def berhu(cls, c: float):
        return cls(BERHU, c=float(c))

    @classmethod
    def boltzmann(cls, n_classes: int):
        return cls(BOLTZMANN, n_classes=int(n_classes))

    @property
    def is_regression(self) -> bool:
        return self.tag != BOLTZMANN

    def with_threshold(self, c: float) -> "LikelihoodFamily":
        return LikelihoodFamily(BERHU, c=clamp_threshold(c))

    def standardized_loss(self, z):
        z = np.asarray(z, dtype=float)
        if self.tag == GAUSSIAN:
            return 0.5 * z * z
        if self.tag == LAPLACE:
            return np.abs(z)
        if self.tag == BERHU:
            return berhu_loss(z, self.c)
        raise ValueError("classification family has no standardized loss")

    @property
    def log_z0(self) -> float:
        if self.tag == GAUSSIAN:
            return LOG_SQRT_2PI
        if self.tag == LAPLACE:
            return math.log(2.0)
        if self.tag == BERHU:
            return berhu_log_z0(self.c)
        raise ValueError("classification family has no location-scale normalizer")

    @property
    def aleatoric_weight(self) -> float:
        """Variance of the unit-scale member: multiply by sigma^2 for aleatoric variance."""
        if self.tag == GAUSSIAN:
            return 1.0
        if self.tag == LAPLACE:
            return 2.0
        if self.tag == BERHU:
            return berhu_w(self.c)
        raise ValueError("classification family has no aleatoric weight")


@dataclass
class PredictiveMoments:
    mean: np.ndarray
    epistemic_var: np.ndarray
    aleatoric_var: np.ndarray

    @property
    def total_var(self):
        return self.epistemic_var + self.aleatoric_var


def location_scale_logpdf(family: LikelihoodFamily, y, f, sigma):
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise DomainError("scale must be positive")
    z = (np.asarray(y, dtype=float) - np.asarray(f, dtype=float)) / sigma
    return -family.standardized_loss(z) - np.log(sigma) - family.log_z0


def boltzmann_logprob(logits, scales, y, axis: int = -1):
    """log softmax(logits / scales) evaluated at class index ``y`` along ``axis``."""
    scales = np.asarray(scales, dtype=float)
    if np.any(scales <= 0):
        raise DomainError("logit scales must be positive")
    z = np.asarray(logits, dtype=float) / scales
    logp = z - logsumexp(z, axis=axis, keepdims=True)
    y = np.asarray(y)
    picked = np.take_along_axis(np.moveaxis(logp, axis, -1), y[..., None], axis=-1)[..., 0]
    return float(picked) if picked.ndim == 0 else picked


def boltzmann_probs(logits, scales, axis: int = -1):
    z = np.asarray(logits, dtype=float) / np.asarray(scales, dtype=float)
    return np.exp(z - logsumexp(z, axis=axis, keepdims=True))


def _moment_tail_ok(loss, order: int) -> bool:
    # |y|^(order+1) exp(-loss(y)) must vanish far out for the moment to be finite
    for sign in (-1.0, 1.0):
        vals = []
        for r in (1e2, 1e4, 1e8):
            with np.errstate(over="ignore", under="ignore"):
                vals.append(r ** (order + 1) * math.exp(-float(loss(sign * r))))
        if not (vals[-1] < 1e-3 and vals[-1] <= vals[0]):
            return False
    return True


def gibbs_normalizer_numeric(loss, bounds=(-np.inf, np.inf), tol: float = 1e-10,
                             breakpoints=(), require_moments: int = 0) -> float:
    """Z = integral of exp(-loss(y)) dy by adaptive quadrature.

    Infinite bounds use the tail transform of ``scipy.integrate.quad``.  With
    ``require_moments=k`` the moments up to order k must also be finite (k=2
    rejects Cauchy-like losses), otherwise :class:`NonFinite` is raised.
    """
    lo, hi = bounds
    if np.isinf(lo) and np.isinf(hi) and not _moment_tail_ok(loss, require_moments):
        raise NonFinite(f"exp(-loss) lacks finite moments up to order {require_moments}")
    pts = sorted(p for p in set(float(b) for b in breakpoints) if lo < p < hi)
    edges = [lo] + pts + [hi]
    if np.isinf(lo) and np.isinf(hi) and not pts:
        edges = [lo, 0.0, hi]
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        value, _ = integrate.quad(lambda t: math.exp(-float(loss(t))), a, b,
                                  epsabs=tol, epsrel=1e-12, limit=400)
        total += value
    if not np.isfinite(total) or total <= 0:
        raise NonFinite(f"normalizer integral is {total}")
    return total


def expected_loglik_gaussian_closed(q_mean, q_var, y, sigma) -> float:
    sigma = np.asarray(sigma, dtype=float)
    q_var = np.asarray(q_var, dtype=float)
    if np.any(sigma <= 0):
        raise DomainError("scale must be positive")
    if np.any(q_var < 0):
        raise DomainError("variance must be non-negative")
    r = np.asarray(y, dtype=float) - np.asarray(q_mean, dtype=float)
    terms = -0.5 * np.log(2 * np.pi * sigma**2) - (r * r + q_var) / (2 * sigma**2)
    return float(np.sum(terms))


def expected_loglik_mc(family: LikelihoodFamily, q_mean, q_var, y, scale, S: int,
                       seed: int, class_axis: int = -1) -> float:
    """Monte Carlo E_q[log p(y | f)] summed over all points.

    Regression: ``q_mean``, ``q_var``, ``y`` and ``scale`` (sigma) broadcast
    elementwise.  Boltzmann: ``q_mean``/``q_var``/``scale`` (sigma^2) carry the
    classes along ``class_axis`` and ``y`` holds class indices.
    """
    if S < 1:
        raise ValueError("S must be at least 1")
    q_mean = np.asarray(q_mean, dtype=float)
    q_var = np.asarray(q_var, dtype=float)
    if np.any(q_var < 0):
        raise DomainError("variance must be non-negative")
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((S,) + q_mean.shape)
    f = q_mean + np.sqrt(q_var) * eps
    if family.is_regression:
        vals = location_scale_logpdf(family, y, f, scale)
    else:
        axis = class_axis % q_mean.ndim + 1
        vals = boltzmann_logprob(f, scale, np.broadcast_to(y, (S,) + np.shape(y)), axis=axis)
    return float(np.sum(vals) / S)


def predictive_moments(family: LikelihoodFamily, q_mean, q_var, sigma) -> PredictiveMoments:
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise DomainError("scale must be positive")
    q_var = np.asarray(q_var, dtype=float)
    return PredictiveMoments(np.asarray(q_mean, dtype=float), q_var,
                             family.aleatoric_weight * sigma**2 * np.ones_like(q_var))
