"""Equivalent GP kernels of infinitely wide, pooling-free Bayesian CNNs.

Without pooling the kernel between two images only couples identical pixel
positions, so it is carried through the network as per-pixel maps: the two
variance maps and the cross-covariance map.  Convolutions average their
receptive field (fan-in scaling, zero padding), ReLUs apply the first-order
arc-cosine moment, and nearest-neighbour resizes copy values around.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .block_cov import GaussianBatch, StructuredCov
from .errors import DomainError, ShapeMismatch

CORR_TOL = 1e-9


@dataclass(frozen=True)
class Conv:
    kh: int = 3
    kw: int = 3
    stride: int = 1
    padding: int = 1
    weight_var: float = 0.2
    bias_var: float = 0.08


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class NearestUpsample:
    """Nearest-neighbour resize, either by an integer ``scale`` or to ``size=(H, W)``.

    A target size smaller than the input subsamples, which also keeps the
    kernel diagonal across pixels.
    """
    scale: int | None = None
    size: tuple[int, int] | None = None


Layer = Union[Conv, Relu, NearestUpsample]


@dataclass
class ArchSpec:
    layers: list
    input_shape: tuple[int, int, int]
    prior_mean: float = 0.5
    noise_var: float = 0.1

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        for layer in self.layers:
            if not isinstance(layer, (Conv, Relu, NearestUpsample)):
                raise ValueError(f"unsupported layer {layer!r}; pooling layers are not allowed")
            if isinstance(layer, Conv) and (layer.weight_var < 0 or layer.bias_var < 0):
                raise ValueError("prior variances must be non-negative")
        if self.noise_var < 0:
            raise ValueError("noise_var must be non-negative")

    @property
    def output_hw(self) -> tuple[int, int]:
        h, w = self.input_shape[1:]
        for layer in self.layers:
            h, w = _out_hw(layer, h, w)
        return h, w


@dataclass
class KernelMaps:
    v_i: np.ndarray
    v_j: np.ndarray
    c_ij: np.ndarray

    def check(self, tol: float = 1e-9) -> bool:
        """Non-negativity and Cauchy-Schwarz, elementwise."""
        bound = np.sqrt(self.v_i * self.v_j)
        return bool(np.all(self.v_i >= 0) and np.all(self.v_j >= 0)
                    and np.all(np.abs(self.c_ij) <= bound * (1 + tol) + tol))


def _out_hw(layer, h, w):
    if isinstance(layer, Conv):
        oh = (h + 2 * layer.padding - layer.kh) // layer.stride + 1
        ow = (w + 2 * layer.padding - layer.kw) // layer.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeMismatch(f"conv {layer} does not fit a {h}x{w} input")
        return oh, ow
    if isinstance(layer, NearestUpsample):
        if layer.size is not None:
            return tuple(layer.size)
        return h * layer.scale, w * layer.scale
    return h, w


def relu_moment(v_i, v_j, c):
    """E[relu(u) relu(w)] for zero-mean Gaussians with variances v_i, v_j and covariance c."""
    v_i, v_j, c = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (v_i, v_j, c)))
    norm = np.sqrt(v_i * v_j)
    out = np.zeros(norm.shape)
    ok = norm > 0
    rho = np.zeros(norm.shape)
    rho[ok] = c[ok] / norm[ok]
    if np.any(np.abs(rho) > 1 + CORR_TOL):
        raise DomainError(f"correlation {np.abs(rho).max():.12g} exceeds 1")
    theta = np.arccos(np.clip(rho, -1.0, 1.0))
    out[ok] = (norm[ok] / (2 * np.pi)) * (np.sin(theta[ok]) + (np.pi - theta[ok]) * np.cos(theta[ok]))
    return out if out.ndim else float(out)


def _receptive_mean(m: np.ndarray, layer: Conv) -> np.ndarray:
    """Mean over each receptive field of a (..., H, W) map, zero padded."""
    pad = [(0, 0)] * (m.ndim - 2) + [(layer.padding, layer.padding)] * 2
    padded = np.pad(m, pad)
    win = sliding_window_view(padded, (layer.kh, layer.kw), axis=(-2, -1))
    win = win[..., ::layer.stride, ::layer.stride, :, :]
    return win.mean(axis=(-2, -1))


def conv_propagate(layer: Conv, maps: KernelMaps) -> KernelMaps:
    def prop(m):
        return layer.bias_var + layer.weight_var * _receptive_mean(m, layer)
    _out_hw(layer, *maps.v_i.shape[-2:])
    return KernelMaps(prop(maps.v_i), prop(maps.v_j), prop(maps.c_ij))


def _resize_index(n_in: int, n_out: int) -> np.ndarray:
    return np.minimum((np.arange(n_out) * n_in) // n_out, n_in - 1)


def _resize(m: np.ndarray, layer: NearestUpsample) -> np.ndarray:
    h, w = m.shape[-2:]
    oh, ow = _out_hw(layer, h, w)
    return m[..., _resize_index(h, oh), :][..., _resize_index(w, ow)]


def upsample_propagate(layer: NearestUpsample, maps: KernelMaps) -> KernelMaps:
    return KernelMaps(_resize(maps.v_i, layer), _resize(maps.v_j, layer), _resize(maps.c_ij, layer))


def relu_propagate(maps: KernelMaps) -> KernelMaps:
    return KernelMaps(
        relu_moment(maps.v_i, maps.v_i, maps.v_i),
        relu_moment(maps.v_j, maps.v_j, maps.v_j),
        relu_moment(maps.v_i, maps.v_j, maps.c_ij),
    )


def _check_input(arch: ArchSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != arch.input_shape:
        raise ShapeMismatch(f"input shape {x.shape} != {arch.input_shape}")
    return x


def initial_maps(x_i: np.ndarray, x_j: np.ndarray) -> KernelMaps:
    """Layer-0 maps: channel means of x_i^2, x_j^2 and x_i * x_j."""
    return KernelMaps((x_i * x_i).mean(axis=0), (x_j * x_j).mean(axis=0), (x_i * x_j).mean(axis=0))


def propagate(arch: ArchSpec, maps: KernelMaps) -> KernelMaps:
    for layer in arch.layers:
        if isinstance(layer, Conv):
            maps = conv_propagate(layer, maps)
        elif isinstance(layer, Relu):
            maps = relu_propagate(maps)
        else:
            maps = upsample_propagate(layer, maps)
    return maps


def equivalent_kernel(arch: ArchSpec, x_i, x_j) -> np.ndarray:
    """Diagonal of K(x_i, x_j) as a flat vector over output pixels."""
    maps = propagate(arch, initial_maps(_check_input(arch, x_i), _check_input(arch, x_j)))
    return maps.c_ij.reshape(-1)


def kernel_blocks(arch: ArchSpec, X) -> np.ndarray:
    """All pairwise kernel diagonals for a batch, shape ``(B, B, H_out * W_out)``.

    Carries a (B, B, H, W) cross-covariance array whose diagonal holds the
    variance maps, which is the pairwise propagation done for all pairs at once.
    """
    X = np.asarray(X, dtype=float)
    if X.shape[1:] != arch.input_shape:
        raise ShapeMismatch(f"batch inputs have shape {X.shape[1:]}, expected {arch.input_shape}")
    C = np.einsum("ichw,jchw->ijhw", X, X) / X.shape[1]
    B = X.shape[0]
    idx = np.arange(B)
    for layer in arch.layers:
        if isinstance(layer, Conv):
            C = layer.bias_var + layer.weight_var * _receptive_mean(C, layer)
        elif isinstance(layer, Relu):
            v = C[idx, idx]
            C = relu_moment(v[:, None], v[None, :], C)
        else:
            C = _resize(C, layer)
    C = 0.5 * (C + C.transpose(1, 0, 2, 3))
    return C.reshape(B, B, -1)


def prior_structured_cov(arch: ArchSpec, X, n_channels: int = 1) -> GaussianBatch:
    """GP prior over a batch of inputs.

    The equivalent kernel is iid over output channels, so with ``n_channels``
    outputs per pixel (e.g. class logits) each image's output vector is laid out
    channel-major, ``index = k * H * W + pixel``, and the pixel kernel repeats
    for every channel.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 4 or X.shape[0] < 1:
        raise ShapeMismatch("X must be a non-empty batch of (C, H, W) inputs")
    blocks = np.tile(kernel_blocks(arch, X), (1, 1, n_channels))
    idx = np.arange(X.shape[0])
    blocks[idx, idx] += arch.noise_var
    mean = np.full(blocks.shape[0] * blocks.shape[2], float(arch.prior_mean))
    return GaussianBatch(mean, StructuredCov(blocks))


def resolution_schedule_arch(input_shape, out_hw=None, weight_var=0.2, bias_var=0.08,
                             fractions=(0.2, 0.4, 0.6, 0.8, 1.0), prior_mean=0.5, noise_var=0.1):
    """Coarse-to-fine convolutional prior for per-pixel outputs.

    A 3x3 conv stem followed by resize-then-conv blocks at 20..100 percent of
    the output resolution and a final 3x3 output conv.
    """
    C, H, W = input_shape
    oh, ow = out_hw or (H, W)
    layers = [Conv(3, 3, 1, 1, weight_var, bias_var), Relu()]
    for f in fractions:
        size = (max(1, int(round(f * oh))), max(1, int(round(f * ow))))
        layers += [NearestUpsample(size=size), Conv(3, 3, 1, 1, weight_var, bias_var), Relu()]
    layers.append(Conv(3, 3, 1, 1, weight_var, bias_var))
    return ArchSpec(layers, (C, H, W), prior_mean=prior_mean, noise_var=noise_var)


def layer_to_text(layer) -> str:
    if isinstance(layer, Conv):
        return (f"conv {layer.kh}x{layer.kw} stride={layer.stride} pad={layer.padding} "
                f"wvar={layer.weight_var!r} bvar={layer.bias_var!r}")
    if isinstance(layer, Relu):
        return "relu"
    if layer.size is not None:
        return f"upsample size={layer.size[0]}x{layer.size[1]}"
    return f"upsample scale={layer.scale}"


def layer_from_text(line: str):
    """Parse one layer line of an architecture file (see :func:`write_arch`)."""
    parts = line.split()
    kind, opts = parts[0], dict(p.split("=", 1) for p in parts[1:] if "=" in p)
    if kind == "relu":
        return Relu()
    if kind == "upsample":
        if "size" in opts:
            h, w = opts["size"].split("x")
            return NearestUpsample(size=(int(h), int(w)))
        return NearestUpsample(scale=int(opts.get("scale", 2)))
    if kind == "conv":
        kh, kw = (int(v) for v in parts[1].split("x"))
        return Conv(kh, kw, int(opts.get("stride", 1)), int(opts.get("pad", 0)),
                    float(opts.get("wvar", 0.2)), float(opts.get("bvar", 0.08)))
    raise ValueError(f"unknown layer '{kind}' (pooling layers are not supported)")


def write_arch(arch: ArchSpec) -> str:
    """Architecture file text: header keys, then one layer per line."""
    lines = [f"input = {'x'.join(str(s) for s in arch.input_shape)}",
             f"prior_mean = {arch.prior_mean!r}",
             f"noise_var = {arch.noise_var!r}"]
    lines += [layer_to_text(layer) for layer in arch.layers]
    return "\n".join(lines) + "\n"


def read_arch(text: str) -> ArchSpec:
    header, layers = {}, []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line and line.split()[0] not in ("conv", "upsample", "relu"):
            key, value = (s.strip() for s in line.split("=", 1))
            header[key] = value
        else:
            layers.append(layer_from_text(line))
    shape = tuple(int(s) for s in header["input"].split("x"))
    return ArchSpec(layers, shape, float(header.get("prior_mean", 0.5)),
                    float(header.get("noise_var", 0.1)))
