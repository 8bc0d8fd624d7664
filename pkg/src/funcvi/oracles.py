"""Independent reference computations used by the test-suite and ``selftest``.

Nothing here shares code with the paths it checks: dense linear algebra for
the structured covariance algebra, adaptive quadrature for normalizers and
moments, sampled finite-width networks for the equivalent kernel, and central
finite differences for gradients.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import integrate

from .cnngp_kernel import ArchSpec, Conv, NearestUpsample, Relu


def dense_inverse(dense: np.ndarray) -> np.ndarray:
    return np.linalg.inv(dense)


def dense_logdet(dense: np.ndarray) -> float:
    sign, value = np.linalg.slogdet(dense)
    if sign <= 0:
        raise np.linalg.LinAlgError("matrix is not positive definite")
    return float(value)


def dense_kl(mean_q, cov_q, mean_p, cov_p) -> float:
    n = len(mean_q)
    p_inv = np.linalg.inv(cov_p)
    d = np.asarray(mean_p) - np.asarray(mean_q)
    return 0.5 * (np.trace(p_inv @ cov_q) + d @ p_inv @ d - n
                  + dense_logdet(cov_p) - dense_logdet(cov_q))


def integrate_real_line(fn, epsabs=1e-10, epsrel=1e-12, breakpoints=()):
    """Integral of ``fn`` over the real line.

    Finite pieces between breakpoints use ``quad`` directly; the two tails use
    ``quad``'s infinite-interval transform.
    """
    pts = sorted(set(float(b) for b in breakpoints)) or [0.0]
    total, err = 0.0, 0.0
    for a, b in zip(pts[:-1], pts[1:]):
        v, e = integrate.quad(fn, a, b, epsabs=epsabs, epsrel=epsrel, limit=200)
        total, err = total + v, err + e
    for a, b in ((-np.inf, pts[0]), (pts[-1], np.inf)):
        v, e = integrate.quad(fn, a, b, epsabs=epsabs, epsrel=epsrel, limit=200)
        total, err = total + v, err + e
    return total, err


def _nearest(a, layer: NearestUpsample):
    h, w = a.shape[-2:]
    if layer.size is not None:
        oh, ow = layer.size
    else:
        oh, ow = h * layer.scale, w * layer.scale
    ri = np.minimum((np.arange(oh) * h) // oh, h - 1)
    ci = np.minimum((np.arange(ow) * w) // ow, w - 1)
    return a[:, :, ri][:, :, :, ci]


def _patches(a, layer: Conv):
    p = layer.padding
    padded = np.pad(a, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(padded, (layer.kh, layer.kw), axis=(2, 3))
    win = win[:, :, ::layer.stride, ::layer.stride]
    n, c, h, w = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, -1), (n, h, w)


def finite_cnn_outputs(arch: ArchSpec, X, channels: int, rng, out_channels: int | None = None):
    """One draw of a finite-width random CNN evaluated on a batch.

    Weights are N(0, weight_var / fan_in) with fan_in = C_in * kh * kw and
    biases N(0, bias_var).  Hidden convolutions have ``channels`` outputs; the
    final convolution has ``out_channels`` (default ``channels``), each an iid
    sample of the output function.  Returns (N, out_channels, H, W).

    Given the incoming activations, a conv layer's outputs over all patches of
    all images are, per output channel, exactly Gaussian with covariance
    ``weight_var / fan_in * patches @ patches.T + bias_var``.  Sampling them
    from that Gram matrix is equivalent to drawing the weight tensor and much
    cheaper when fan_in exceeds the number of patches.
    """
    a = np.asarray(X, dtype=np.float64)
    convs = [i for i, layer in enumerate(arch.layers) if isinstance(layer, Conv)]
    last = convs[-1]
    for i, layer in enumerate(arch.layers):
        if isinstance(layer, Conv):
            c_out = (out_channels or channels) if i == last else channels
            cols, (n, h, w) = _patches(a, layer)
            gram = (layer.weight_var / cols.shape[1]) * (cols @ cols.T) + layer.bias_var
            evals, evecs = np.linalg.eigh(gram)
            root = evecs * np.sqrt(np.clip(evals, 0.0, None))
            z = root @ rng.standard_normal((root.shape[1], c_out))
            a = z.reshape(n, h, w, c_out).transpose(0, 3, 1, 2)
        elif isinstance(layer, Relu):
            a = np.maximum(a, 0)
        else:
            a = _nearest(a, layer)
    return a


def finite_cnn_outputs_explicit(arch: ArchSpec, X, channels: int, rng,
                                out_channels: int | None = None):
    """Same distribution as :func:`finite_cnn_outputs`, drawing every weight explicitly."""
    a = np.asarray(X, dtype=np.float64)
    convs = [i for i, layer in enumerate(arch.layers) if isinstance(layer, Conv)]
    last = convs[-1]
    for i, layer in enumerate(arch.layers):
        if isinstance(layer, Conv):
            c_out = (out_channels or channels) if i == last else channels
            cols, (n, h, w) = _patches(a, layer)
            W = rng.standard_normal((cols.shape[1], c_out)) * np.sqrt(layer.weight_var / cols.shape[1])
            b = rng.standard_normal(c_out) * np.sqrt(layer.bias_var)
            a = (cols @ W + b).reshape(n, h, w, c_out).transpose(0, 3, 1, 2)
        elif isinstance(layer, Relu):
            a = np.maximum(a, 0)
        else:
            a = _nearest(a, layer)
    return a


def readout_kernel(arch: ArchSpec, X, channels: int, rng) -> np.ndarray:
    """Kernel of one finite-width draw with the output layer integrated out.

    Hidden layers are sampled as in :func:`finite_cnn_outputs`; the final
    convolution's weights and bias are averaged analytically, giving
    ``bias_var + weight_var / fan_in * <patch_i, patch_j>`` at every output
    pixel.  Requires the architecture to end with a convolution.  Returns
    (B, B, H, W).
    """
    if not isinstance(arch.layers[-1], Conv):
        raise ValueError("analytic readout needs a final convolution layer")
    head = ArchSpec(arch.layers[:-1], arch.input_shape, arch.prior_mean, arch.noise_var)
    if any(isinstance(layer, Conv) for layer in head.layers):
        a = finite_cnn_outputs(head, X, channels, rng)
    else:
        a = np.asarray(X, dtype=np.float64)
        for layer in head.layers:
            a = np.maximum(a, 0) if isinstance(layer, Relu) else _nearest(a, layer)
    last = arch.layers[-1]
    cols, (n, h, w) = _patches(a, last)
    cols = cols.reshape(n, h * w, -1)
    k = np.einsum("iqf,jqf->ijq", cols, cols) * (last.weight_var / cols.shape[2]) + last.bias_var
    return k.reshape(n, n, h, w)


def mc_kernel(arch: ArchSpec, X, channels: int, n_draws: int, seed: int = 0,
              readout: str = "analytic", out_channels: int | None = None,
              explicit_weights: bool = False) -> np.ndarray:
    """Monte Carlo estimate of the pairwise kernel diagonals, shape (B, B, H*W).

    ``readout="analytic"`` averages the output layer exactly in each draw
    (:func:`readout_kernel`); ``"sampled"`` draws it too and averages
    f_c(x_i)[p] * f_c(x_j)[p] over its ``out_channels`` outputs.
    """
    rng = np.random.default_rng(seed)
    X = np.asarray(X)
    draw = finite_cnn_outputs_explicit if explicit_weights else finite_cnn_outputs
    acc = None
    for _ in range(n_draws):
        if readout == "analytic":
            est = readout_kernel(arch, X, channels, rng)
        else:
            f = draw(arch, X, channels, rng, out_channels)
            est = np.einsum("ichw,jchw->ijhw", f, f) / f.shape[1]
        acc = est if acc is None else acc + est
    acc /= n_draws
    return acc.reshape(X.shape[0], X.shape[0], -1)


def central_difference(fn, x: np.ndarray, coords, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn`` at flat indices ``coords`` of ``x`` (modified in place, restored)."""
    flat = x.reshape(-1)
    out = np.empty(len(coords))
    for k, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + h
        up = fn()
        flat[c] = orig - h
        down = fn()
        flat[c] = orig
        out[k] = (up - down) / (2 * h)
    return out
