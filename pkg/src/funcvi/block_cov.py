"""Covariance algebra for batches of multi-output Gaussians with diagonal blocks.

A ``StructuredCov`` stores a BP x BP matrix whose B x B grid of P x P blocks
are all diagonal.  Only the diagonals are kept, as an array of shape
``(B, B, P)``, so memory is O(B^2 P).  Flattened vectors use the layout
``index = i * P + p`` (image ``i``, output ``p``).

Inversion and log-determinants go through a recursive Schur-complement sweep
that grows the inverse one block row at a time; every intermediate quantity
is a stack of length-P vectors.
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import NonPositiveDefinite, ShapeMismatch

PIVOT_TOL = 1e-12


@dataclass
class StructuredCov:
    blocks: np.ndarray

    def __post_init__(self):
        blocks = np.asarray(self.blocks, dtype=float)
        if blocks.ndim != 3 or blocks.shape[0] != blocks.shape[1]:
            raise ShapeMismatch(f"blocks must have shape (B, B, P), got {blocks.shape}")
        if blocks.shape[0] < 1 or blocks.shape[2] < 1:
            raise ShapeMismatch("B and P must be at least 1")
        if not np.array_equal(blocks, blocks.transpose(1, 0, 2)):
            raise ValueError("blocks must be symmetric: blocks[i, j] == blocks[j, i]")
        self.blocks = blocks

    @property
    def B(self) -> int:
        return self.blocks.shape[0]

    @property
    def P(self) -> int:
        return self.blocks.shape[2]

    @classmethod
    def identity(cls, B: int, P: int) -> "StructuredCov":
        blocks = np.zeros((B, B, P))
        blocks[np.arange(B), np.arange(B)] = 1.0
        return cls(blocks)

    @classmethod
    def from_per_pixel(cls, mats: np.ndarray) -> "StructuredCov":
        """Inverse of :func:`per_pixel_view`; ``mats`` has shape ``(P, B, B)``."""
        return cls(np.ascontiguousarray(np.asarray(mats, dtype=float).transpose(1, 2, 0)))


@dataclass
class GaussianBatch:
    mean: np.ndarray
    cov: StructuredCov

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(-1)
        if self.mean.size != self.cov.B * self.cov.P:
            raise ShapeMismatch(
                f"mean has length {self.mean.size}, expected B*P = {self.cov.B * self.cov.P}"
            )


def to_dense(K: StructuredCov) -> np.ndarray:
    B, P = K.B, K.P
    dense = np.zeros((B, P, B, P))
    idx = np.arange(P)
    dense[:, idx, :, idx] = K.blocks.transpose(2, 0, 1)
    return dense.reshape(B * P, B * P)


def per_pixel_view(K: StructuredCov) -> np.ndarray:
    """Return the P dense B x B matrices ``M_p[i, j] = blocks[i, j, p]``, shape ``(P, B, B)``."""
    return np.ascontiguousarray(K.blocks.transpose(2, 0, 1))


def add_jitter(K: StructuredCov, eps: float) -> StructuredCov:
    if eps < 0:
        raise ValueError("jitter must be non-negative")
    blocks = K.blocks.copy()
    i = np.arange(K.B)
    blocks[i, i] += eps
    return StructuredCov(blocks)


def _schur_sweep(blocks: np.ndarray, tol: float = PIVOT_TOL):
    """Grow the inverse of the leading block submatrix one block at a time.

    Returns ``(inverse_blocks, pivots)`` where ``pivots[n]`` is the diagonal of
    the Schur complement S_n used when adding block row ``n``.
    """
    B, _, P = blocks.shape
    pivots = np.empty((B, P))

    first = blocks[0, 0]
    if np.any(first <= tol):
        raise NonPositiveDefinite(f"pivot 0 has entry {first.min():.3e} <= {tol:g}")
    pivots[0] = first
    inv = (1.0 / first)[None, None, :]

    for n in range(1, B):
        col = blocks[:n, n]                                  # K_{:n, n+1}, shape (n, P)
        u = np.einsum("abp,bp->ap", inv, col)                # K_{:n,:n}^{-1} K_{:n, n+1}
        s = blocks[n, n] - np.einsum("ap,ap->p", col, u)     # Schur complement diagonal
        if np.any(s <= tol):
            raise NonPositiveDefinite(f"pivot {n} has entry {s.min():.3e} <= {tol:g}")
        pivots[n] = s
        s_inv = 1.0 / s

        grown = np.empty((n + 1, n + 1, P))
        grown[:n, :n] = inv + u[:, None, :] * u[None, :, :] * s_inv
        off = -u * s_inv
        grown[:n, n] = off
        grown[n, :n] = off
        grown[n, n] = s_inv
        inv = grown

    return inv, pivots


def schur_inverse(K: StructuredCov) -> StructuredCov:
    inv, _ = _schur_sweep(K.blocks)
    return StructuredCov(_symmetrize(inv))


def logdet(K: StructuredCov) -> float:
    _, pivots = _schur_sweep(K.blocks)
    return float(np.sum(np.log(pivots)))


def inverse_and_logdet(K: StructuredCov) -> tuple[StructuredCov, float]:
    """One sweep giving both ``K^{-1}`` and ``log det K``."""
    inv, pivots = _schur_sweep(K.blocks)
    return StructuredCov(_symmetrize(inv)), float(np.sum(np.log(pivots)))


def _symmetrize(blocks: np.ndarray) -> np.ndarray:
    # the sweep is symmetric in exact arithmetic; remove rounding asymmetry
    return 0.5 * (blocks + blocks.transpose(1, 0, 2))


def cholesky_per_pixel(K: StructuredCov) -> np.ndarray:
    """Lower Cholesky factors of each per-pixel matrix, shape ``(P, B, B)``."""
    try:
        return np.linalg.cholesky(per_pixel_view(K))
    except np.linalg.LinAlgError as exc:
        raise NonPositiveDefinite(str(exc)) from None


def _sqrt_factor(K: StructuredCov, tol: float = 1e-9) -> np.ndarray:
    # Cholesky when possible; singular PSD matrices (e.g. zero covariance)
    # fall back to a symmetric eigen square root.
    try:
        return cholesky_per_pixel(K)
    except NonPositiveDefinite:
        pass
    mats = per_pixel_view(K)
    w, V = np.linalg.eigh(mats)
    scale = max(1.0, float(np.abs(w).max()))
    if np.any(w < -tol * scale):
        raise NonPositiveDefinite(f"per-pixel matrix has eigenvalue {w.min():.3e}")
    return V * np.sqrt(np.clip(w, 0.0, None))[:, None, :]


def sample(g: GaussianBatch, n_samples: int, rng_seed: int) -> np.ndarray:
    """Draw ``n_samples`` joint samples, returned with shape ``(n_samples, B*P)``."""
    B, P = g.cov.B, g.cov.P
    factors = _sqrt_factor(g.cov)
    rng = np.random.default_rng(rng_seed)
    eps = rng.standard_normal((n_samples, P, B))
    draws = np.einsum("pib,npb->nip", factors, eps)
    return g.mean[None, :] + draws.reshape(n_samples, B * P)


def gaussian_kl(q: GaussianBatch, p: GaussianBatch) -> float:
    """KL(q || p) computed with structured operations only."""
    if (q.cov.B, q.cov.P) != (p.cov.B, p.cov.P):
        raise ShapeMismatch("q and p must share B and P")
    B, P = p.cov.B, p.cov.P
    p_inv, logdet_p = inverse_and_logdet(p.cov)
    logdet_q = logdet(q.cov)
    trace = float(np.sum(p_inv.blocks * q.cov.blocks))
    delta = (p.mean - q.mean).reshape(B, P)
    quad = float(np.einsum("ip,ijp,jp->", delta, p_inv.blocks, delta))
    return 0.5 * (trace + quad - B * P + logdet_p - logdet_q)


def write_csv(K: StructuredCov, fh) -> None:
    """Debug dump: a ``B,P`` header row, then ``i,j,p,value`` rows for nonzeros."""
    fh.write("B,P\n")
    fh.write(f"{K.B},{K.P}\n")
    fh.write("i,j,p,value\n")
    for i, j, p in zip(*np.nonzero(K.blocks)):
        fh.write(f"{i},{j},{p},{float(K.blocks[i, j, p])!r}\n")


def read_csv(fh) -> StructuredCov:
    lines = [ln.strip() for ln in fh if ln.strip()]
    if lines[0] != "B,P" or lines[2] != "i,j,p,value":
        raise ValueError("not a structured covariance dump")
    B, P = (int(v) for v in lines[1].split(","))
    blocks = np.zeros((B, B, P))
    for ln in lines[3:]:
        i, j, p, value = ln.split(",")
        blocks[int(i), int(j), int(p)] = float(value)
    return StructuredCov(blocks)


def dumps_csv(K: StructuredCov) -> str:
    buf = io.StringIO()
    write_csv(K, buf)
    return buf.getvalue()
