"""Function-space variational inference against a CNN-GP prior.

The objective maximized for a mini-batch (X_B, y_B) of a dataset of size N is

    (N / B) * sum_i E_q[log p(y_i | f(x_i))]  -  KL(q(f^X) || p(f^X)),

with X the batch joined with a few noisy copies X' of its members.  Only the
batch members carry a data term.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import gradnet as gn
from . import likelihoods as lk
from .block_cov import GaussianBatch, StructuredCov, inverse_and_logdet
from .cnngp_kernel import ArchSpec, prior_structured_cov
from .errors import DomainError, EmptyInput, NonFinite, ShapeMismatch
from .varfam import CLASSIFICATION, VarFamily, VarHeads, rsample_q

IGNORE_LABEL = 255
LOG_COLUMNS = ("epoch", "step", "objective", "data_term", "kl", "lr", "c_threshold")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    mc_samples: int = 8
    epochs: int = 10
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    jitter: float = 1e-3
    inducing_noise_var: float = 0.1
    n_inducing: int = 1
    data_scale: bool = True
    likelihood: str = lk.GAUSSIAN
    seed: int = 0
    lr_decay: float = 1.0
    grad_clip: float | None = None
    cls_samples: int = 32

    def __post_init__(self):
        if self.batch_size < 1 or self.mc_samples < 1 or self.n_inducing < 0:
            raise ValueError("batch_size and mc_samples must be >= 1, n_inducing >= 0")
        if self.inducing_noise_var < 0 or self.jitter < 0 or self.lr < 0:
            raise ValueError("variances and learning rate must be non-negative")


@dataclass
class FviModel:
    """Variational network, prior and likelihood.

    For berHu ``c_threshold`` holds the recorded threshold; for Boltzmann the
    number of classes is the family's channel count.
    """
    family: VarFamily
    prior: ArchSpec
    likelihood: str = lk.GAUSSIAN
    c_threshold: float | None = None

    def __post_init__(self):
        if self.prior.output_hw != self.family.out_hw:
            raise ShapeMismatch(f"prior output {self.prior.output_hw} != variational output {self.family.out_hw}")
        classification = self.likelihood == lk.BOLTZMANN
        if classification != (self.family.task == CLASSIFICATION):
            raise ValueError("Boltzmann likelihood goes with a classification family")

    @property
    def is_classification(self) -> bool:
        return self.family.task == CLASSIFICATION

    def likelihood_family(self, c: float | None = None) -> lk.LikelihoodFamily:
        if self.likelihood == lk.BERHU:
            c = self.c_threshold if c is None else c
            return lk.LikelihoodFamily.berhu(lk.clamp_threshold(1.0 if c is None else c))
        if self.likelihood == lk.BOLTZMANN:
            return lk.LikelihoodFamily.boltzmann(self.family.C)
        return lk.LikelihoodFamily(self.likelihood)


def inducing_inputs(X_B, rng, noise_var: float = 0.1, n: int = 1) -> np.ndarray:
    """``n`` uniformly chosen batch members plus iid N(0, noise_var) pixel noise."""
    X_B = np.asarray(X_B, dtype=float)
    if X_B.shape[0] == 0:
        raise EmptyInput("cannot draw inducing inputs from an empty batch")
    pick = rng.integers(0, X_B.shape[0], size=n)
    return X_B[pick] + math.sqrt(noise_var) * rng.standard_normal((n,) + X_B.shape[1:])


def kl_tensor(mean: gn.Tensor, cov: gn.Tensor, prior: GaussianBatch) -> gn.Tensor:
    """KL(q || prior) as an autodiff node.

    ``mean`` is (B, P) and ``cov`` the (B, B, P) blocks of q.  Gradients are
    P^{-1}(mu - m) for the mean and (P^{-1} - Q^{-1}) / 2 for the blocks.
    """
    mean, cov = gn._lift(mean), gn._lift(cov)
    B, P = mean.shape
    q_blocks = 0.5 * (cov.value + cov.value.transpose(1, 0, 2))
    q_inv, ld_q = inverse_and_logdet(StructuredCov(q_blocks))
    p_inv, ld_p = inverse_and_logdet(prior.cov)
    d = mean.value - prior.mean.reshape(B, P)
    pd = np.einsum("ijp,jp->ip", p_inv.blocks, d)
    value = 0.5 * (np.sum(p_inv.blocks * q_blocks) + np.sum(d * pd) - B * P + ld_p - ld_q)
    g_cov = 0.5 * (p_inv.blocks - q_inv.blocks)
    return gn.Tensor(value, ((mean, lambda g: g * pd), (cov, lambda g: g * g_cov)))


def _check_duplicates(X, arch: ArchSpec):
    if arch.noise_var > 0:
        return
    flat = X.reshape(X.shape[0], -1)
    if np.unique(flat, axis=0).shape[0] != flat.shape[0]:
        raise DomainError("duplicate inputs make the noise-free prior singular")


def expected_abs_residual(heads: VarHeads, y, samples) -> np.ndarray:
    """Monte Carlo E_q|y - f| per output, from (S, B, P) samples."""
    return np.abs(np.asarray(y, dtype=float)[None] - gn._lift(samples).value).mean(axis=0)


def _regression_data_term(family: lk.LikelihoodFamily, heads: VarHeads, y, f: gn.Tensor):
    sigma = heads.scale
    z = (y[None] - f) / sigma
    if family.tag == lk.LAPLACE:
        loss = gn.abs_(z)
    elif family.tag == lk.BERHU:
        a = gn.abs_(z)
        loss = gn.where(a.value <= family.c, a, (gn.square(z) + family.c ** 2) * (0.5 / family.c))
    else:
        loss = gn.square(z) * 0.5
    S = f.shape[0]
    return -(loss.sum() * (1.0 / S)) - gn.log(sigma).sum() - family.log_z0 * y.size


def _gaussian_closed_data_term(heads: VarHeads, y):
    var = gn.square(heads.features).sum(axis=1) * (1.0 / heads.features.shape[1]) + heads.diag
    sigma = heads.scale
    quad = (gn.square(y - heads.mean) + var) / (gn.square(sigma) * 2.0)
    return -quad.sum() - gn.log(sigma).sum() - lk.LOG_SQRT_2PI * y.size


def _boltzmann_data_term(heads: VarHeads, y, f: gn.Tensor, n_classes: int):
    S, B, P = f.shape
    hw = P // n_classes
    labels = np.asarray(y).reshape(B, hw)
    valid = labels != IGNORE_LABEL
    onehot = np.zeros((B, n_classes, hw))
    bi, pi = np.nonzero(valid)
    onehot[bi, labels[bi, pi], pi] = 1.0
    logits = (f / heads.scale).reshape(S, B, n_classes, hw)
    logp = gn.log_softmax(logits, axis=2)
    return (logp * onehot).sum() * (1.0 / S)


@dataclass
class ObjectiveParts:
    objective: gn.Tensor
    data_term: float
    kl: float
    c_threshold: float | None = None


def fvi_objective(model: FviModel, X_B, y_B, X_ind, cfg: TrainConfig, n_data: int,
                  rng, params: dict | None = None, c: float | None = None) -> ObjectiveParts:
    """Objective at a batch.  ``rng`` supplies the reparametrization noise.

    For berHu the threshold is ``c`` when given, else one fifth of the largest
    Monte Carlo expected absolute residual of this batch (floored).  It is a
    constant for differentiation.
    """
    X_B = np.asarray(X_B, dtype=float)
    X_ind = np.asarray(X_ind, dtype=float).reshape((-1,) + X_B.shape[1:])
    y_B = np.asarray(y_B)
    B = X_B.shape[0]
    if B == 0:
        raise EmptyInput("empty batch")
    if y_B.shape[0] != B:
        raise ShapeMismatch("inputs and targets disagree on batch size")
    fam = model.family
    X = np.concatenate([X_B, X_ind]) if X_ind.shape[0] else X_B
    _check_duplicates(X, model.prior)
    if params is None:
        params = {k: gn.Tensor(v) for k, v in fam.params.items()}
    heads = fam.split(fam.net.apply(params, X))
    mine = VarHeads(heads.mean[:B], heads.features[:B], heads.diag[:B], heads.scale[:B])

    S = cfg.mc_samples
    eps_f = rng.standard_normal((S, fam.L, fam.P))
    eps_d = rng.standard_normal((S, B, fam.P))
    c_used = None
    if model.is_classification:
        f = rsample_q(mine, eps_f, eps_d)
        data = _boltzmann_data_term(mine, y_B, f, fam.C)
    else:
        y = y_B.reshape(B, fam.P).astype(float)
        if cfg.likelihood == lk.GAUSSIAN:
            data = _gaussian_closed_data_term(mine, y)
        else:
            f = rsample_q(mine, eps_f, eps_d)
            if cfg.likelihood == lk.BERHU:
                if c is None:
                    c = lk.berhu_threshold(expected_abs_residual(mine, y, f))
                c_used = lk.clamp_threshold(c)
            data = _regression_data_term(model.likelihood_family(c_used), mine, y, f)

    kl = kl_tensor(heads.mean, gn.einsum2("ikp,jkp->ijp", heads.features, heads.features)
                   * (1.0 / fam.L) + gn.diag_embed(heads.diag),
                   prior_structured_cov(model.prior, X, n_channels=fam.C))
    weight = n_data / B if cfg.data_scale else 1.0
    obj = data * weight - kl
    if not np.isfinite(obj.value):
        raise NonFinite(f"objective is {float(obj.value)} (data {float(data.value)}, kl {float(kl.value)})")
    return ObjectiveParts(obj, float(data.value) * weight, float(kl.value), c_used)


def objective_and_grads(model: FviModel, X_B, y_B, X_ind, cfg: TrainConfig, n_data: int,
                        rng, c: float | None = None):
    params = model.family.net.param_tensors()
    parts = fvi_objective(model, X_B, y_B, X_ind, cfg, n_data, rng, params=params, c=c)
    parts.objective.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.value)) for k, t in params.items()}
    gn.check_finite(grads)
    return parts, grads


@dataclass
class TrainResult:
    model: FviModel
    log: list = field(default_factory=list)


def train(model: FviModel, X, y, cfg: TrainConfig, log_path=None) -> TrainResult:
    """Mini-batch training by momentum SGD on the negated objective divided by N.

    One log row per epoch holds epoch means of objective, data term and KL,
    the cumulative step count, the learning rate and (berHu) the largest
    threshold seen in that epoch.  The model's recorded threshold is the
    largest one of the final epoch.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    N = X.shape[0]
    if N == 0:
        raise EmptyInput("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    state: dict = {}
    net = model.family.net
    lr, step, rows = cfg.lr, 0, []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(N)
        sums = np.zeros(3)
        n_batches, c_max = 0, None
        for start in range(0, N, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            X_ind = inducing_inputs(X[idx], rng, cfg.inducing_noise_var, cfg.n_inducing)
            try:
                parts, grads = objective_and_grads(model, X[idx], y[idx], X_ind, cfg, N, rng)
            except NonFinite as exc:
                raise NonFinite(f"epoch {epoch} step {step + 1}: {exc}") from None
            grads = {k: -g / N for k, g in grads.items()}
            if cfg.grad_clip is not None:
                norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                if norm > cfg.grad_clip:
                    grads = {k: g * (cfg.grad_clip / norm) for k, g in grads.items()}
            net.params = gn.sgd_step(net.params, grads, lr, cfg.weight_decay, cfg.momentum, state)
            step += 1
            n_batches += 1
            sums += (float(parts.objective.value), parts.data_term, parts.kl)
            if parts.c_threshold is not None:
                c_max = parts.c_threshold if c_max is None else max(c_max, parts.c_threshold)
        means = sums / n_batches
        rows.append({"epoch": epoch, "step": step, "objective": means[0], "data_term": means[1],
                     "kl": means[2], "lr": lr, "c_threshold": c_max})
        if c_max is not None:
            model.c_threshold = c_max
        lr *= cfg.lr_decay
    if log_path is not None:
        write_log_csv(rows, log_path)
    return TrainResult(model, rows)


def write_log_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["epoch"], r["step"]] + [repr(float(r[k])) for k in ("objective", "data_term", "kl", "lr")]
                       + ["" if r["c_threshold"] is None else repr(float(r["c_threshold"]))])


@dataclass
class ClassPrediction:
    probs: np.ndarray      # (B, K, HW)
    entropy: np.ndarray    # (B, HW)

    @property
    def labels(self) -> np.ndarray:
        return self.probs.argmax(axis=1)


def predict(model: FviModel, X, seed: int = 0, cls_samples: int = 32):
    """Predictive summary from a single evaluation of the variational network.

    Regression returns :class:`~funcvi.likelihoods.PredictiveMoments` of shape
    (B, P).  Classification samples the per-pixel Gaussian over re-scaled
    logits ``cls_samples`` times, averages the softmax and reports the entropy
    of the average.
    """
    heads = model.family.heads(np.asarray(X, dtype=float))
    var = heads.marginal_var()
    if not model.is_classification:
        return lk.predictive_moments(model.likelihood_family(), heads.mean, var, heads.scale)
    K = model.family.C
    B, P = heads.mean.shape
    hw = P // K
    rng = np.random.default_rng(seed)
    f = heads.mean + np.sqrt(var) * rng.standard_normal((cls_samples, B, P))
    z = (f / heads.scale).reshape(cls_samples, B, K, hw)
    z = z - z.max(axis=2, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=2, keepdims=True)
    probs = p.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.sum(np.where(probs > 0, probs * np.log(probs), 0.0), axis=1)
    return ClassPrediction(probs, ent)


def write_predictions_csv(pred, path) -> None:
    """Per-output dump: ``index,mean,epistemic_var,aleatoric_var`` or ``index,class,prob,entropy``.

    Indices run over the flattened batch (image-major).  Classification rows
    list every class of every pixel.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if isinstance(pred, ClassPrediction):
            w.writerow(("index", "class", "prob", "entropy"))
            B, K, hw = pred.probs.shape
            for b in range(B):
                for p in range(hw):
                    for k in range(K):
                        w.writerow((b * hw + p, k, repr(float(pred.probs[b, k, p])),
                                    repr(float(pred.entropy[b, p]))))
        else:
            w.writerow(("index", "mean", "epistemic_var", "aleatoric_var"))
            m = pred.mean.reshape(-1)
            e = pred.epistemic_var.reshape(-1)
            a = pred.aleatoric_var.reshape(-1)
            for i in range(m.size):
                w.writerow((i, repr(float(m[i])), repr(float(e[i])), repr(float(a[i]))))
