"""Synthetic datasets small enough to train on a laptop CPU.

* ``gen_regression_1d``: heteroscedastic 1D regression, inputs tiled into a
  1x1x8 strip.
* ``gen_minidepth``: 8x8 scenes of rectangles in front of a slanted plane;
  predict depth from intensity.
* ``gen_miniseg``: 8x8 three-class blob maps with an ignore label on class
  boundaries and a small label-noise patch per image.

Every generator is a pure function of ``(n, seed)``.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .cnngp_kernel import ArchSpec, Conv, Relu, resolution_schedule_arch
from . import gradnet as gn

IGNORE_LABEL = 255
STRIP = 8
SEG_LEVELS = (0.15, 0.5, 0.85)


@dataclass
class ToyDataset:
    task: str                      # regression | depth | segmentation
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    seed: int
    X_ood: np.ndarray | None = None
    n_classes: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def input_shape(self):
        return self.X_train.shape[1:]


# 1D regression ------------------------------------------------------------
def noise_scale_1d(x):
    return 0.05 * (1.0 + np.asarray(x, dtype=float) ** 2)


def encode_1d(x) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    return np.repeat(x[:, None], STRIP, axis=1).reshape(-1, 1, 1, STRIP)


def _targets_1d(x, rng):
    return np.sin(2 * x) + noise_scale_1d(x) * rng.standard_normal(x.shape)


def gen_regression_1d(n: int, seed: int, n_test: int | None = None, n_ood: int = 64) -> ToyDataset:
    """y = sin(2x) + 0.05 (1 + x^2) eps on x ~ U[-3, 3]; OOD probes at 5 <= |x| <= 6."""
    rng = np.random.default_rng(seed)
    n_test = max(1, n // 4) if n_test is None else n_test
    x_tr = rng.uniform(-3, 3, n)
    x_te = rng.uniform(-3, 3, n_test)
    y_tr, y_te = _targets_1d(x_tr, rng), _targets_1d(x_te, rng)
    x_ood = rng.uniform(5, 6, n_ood) * rng.choice([-1.0, 1.0], n_ood)
    return ToyDataset("regression", encode_1d(x_tr), y_tr[:, None], encode_1d(x_te), y_te[:, None], seed,
                      X_ood=encode_1d(x_ood),
                      meta={"x_train": x_tr, "x_test": x_te, "x_ood": x_ood})


# depth --------------------------------------------------------------------
def gen_minidepth(n: int, seed: int, n_test: int | None = None, size: int = 8,
                  max_rects: int = 3) -> ToyDataset:
    """Rectangles over a slanted background plane, painted far to near.

    Background depth rises linearly with the row from ``a`` to ``a + s``;
    each rectangle sits at the plane's mean depth minus its own offset.
    The input intensity is ``1 - depth``.  ``meta["rects"]`` lists every
    image's rectangles as (top, left, bottom, right, depth).
    """
    rng = np.random.default_rng(seed)
    n_test = max(1, n // 4) if n_test is None else n_test
    total = n + n_test
    depth = np.empty((total, size, size))
    rects = []
    rows = np.arange(size)[:, None] / (size - 1)
    for k in range(total):
        a, s = rng.uniform(0.55, 0.7), rng.uniform(0.0, 0.25)
        d = np.broadcast_to(a + s * rows, (size, size)).copy()
        mine = []
        for _ in range(rng.integers(1, max_rects + 1)):
            t, l = rng.integers(0, size - 1, 2)
            b = rng.integers(t + 1, size + 1)
            r = rng.integers(l + 1, size + 1)
            mine.append((int(t), int(l), int(b), int(r), float(a + s / 2 - rng.uniform(0.1, 0.5))))
        # painter's algorithm: farthest first
        for t, l, b, r, z in sorted(mine, key=lambda q: -q[4]):
            d[t:b, l:r] = z
        depth[k] = d
        rects.append(mine)
    X = (1.0 - depth)[:, None]
    y = depth.reshape(total, -1)
    return ToyDataset("depth", X[:n], y[:n], X[n:], y[n:], seed,
                      meta={"rects": rects})


# segmentation -------------------------------------------------------------
def gen_miniseg(n: int, seed: int, n_test: int | None = None, size: int = 8,
                smooth: float = 1.2, margin: float = 0.08, noise_sd: float = 0.04) -> ToyDataset:
    """Three-class blob maps from the argmax of three smoothed noise fields.

    Pixels whose top-two field values are closer than ``margin`` (class
    borders) get the ignore label.  Input intensity is the class level plus
    Gaussian noise.  Each image also carries a 2x2 patch at the midpoint
    intensity between two adjacent classes whose labels are drawn at random
    from that pair; ``meta["noise_mask"]`` marks it.
    """
    rng = np.random.default_rng(seed)
    n_test = max(1, n // 4) if n_test is None else n_test
    total = n + n_test
    X = np.empty((total, 1, size, size))
    Y = np.empty((total, size * size), dtype=np.int64)
    mask = np.zeros((total, size, size), dtype=bool)
    levels = np.asarray(SEG_LEVELS)
    for k in range(total):
        fields = np.stack([gaussian_filter(rng.standard_normal((size, size)), smooth, mode="wrap")
                           for _ in range(3)])
        fields /= fields.std(axis=(1, 2), keepdims=True)
        labels = fields.argmax(axis=0)
        top2 = np.sort(fields, axis=0)[-2:]
        img = levels[labels] + noise_sd * rng.standard_normal((size, size))
        out = np.where(top2[1] - top2[0] < margin, IGNORE_LABEL, labels)
        lo = int(rng.integers(0, 2))
        t, l = rng.integers(0, size - 1, 2)
        img[t:t + 2, l:l + 2] = 0.5 * (levels[lo] + levels[lo + 1]) + noise_sd * rng.standard_normal((2, 2))
        out[t:t + 2, l:l + 2] = lo + rng.integers(0, 2, (2, 2))
        mask[k, t:t + 2, l:l + 2] = True
        X[k, 0] = np.clip(img, 0.0, 1.0)
        Y[k] = out.reshape(-1)
    return ToyDataset("segmentation", X[:n], Y[:n], X[n:], Y[n:], seed, n_classes=3,
                      meta={"noise_mask_train": mask[:n], "noise_mask_test": mask[n:]})


# default architectures ----------------------------------------------------
def prior_arch_1d(weight_var: float = 2.0, bias_var: float = 0.5, noise_var: float = 0.1,
                  prior_mean: float = 0.0) -> ArchSpec:
    """Strip conv (1x8, unpadded) -> relu -> 1x1 conv; variance grows like x^2."""
    return ArchSpec([Conv(1, STRIP, 1, 0, weight_var, bias_var), Relu(), Conv(1, 1, 1, 0, weight_var, bias_var)],
                    (1, 1, STRIP), prior_mean=prior_mean, noise_var=noise_var)


def prior_arch_image(input_shape=(1, 8, 8), prior_mean: float = 0.5, noise_var: float = 0.1) -> ArchSpec:
    return resolution_schedule_arch(input_shape, prior_mean=prior_mean, noise_var=noise_var)


def var_net_1d(L: int, hidden: int = 64, seed: int = 0) -> gn.Net:
    return gn.Net([gn.Dense(hidden), gn.Act(), gn.Dense(hidden), gn.Act(), gn.Dense(L + 3)],
                  (1, 1, STRIP), seed=seed)


def var_net_image(L: int, n_channels: int, input_shape=(1, 8, 8), hidden: int = 16, seed: int = 0) -> gn.Net:
    return gn.Net([gn.Conv3x3(hidden), gn.Act(), gn.Conv3x3(hidden), gn.Act(),
                   gn.Conv3x3((L + 3) * n_channels)], input_shape, seed=seed)


# I/O ----------------------------------------------------------------------
_ARRAYS = ("X_train", "y_train", "X_test", "y_test", "X_ood")


def dump_dataset(ds: ToyDataset, directory) -> None:
    """One CSV per array (one row per example) plus ``manifest.json`` with shapes."""
    os.makedirs(directory, exist_ok=True)
    manifest = {"task": ds.task, "seed": ds.seed, "n_classes": ds.n_classes, "arrays": {}}
    for name in _ARRAYS:
        arr = getattr(ds, name)
        if arr is None:
            continue
        fmt = "%d" if arr.dtype.kind in "iub" else "%.17g"
        np.savetxt(os.path.join(directory, f"{name}.csv"), arr.reshape(arr.shape[0], -1),
                   fmt=fmt, delimiter=",")
        manifest["arrays"][name] = {"shape": list(arr.shape), "dtype": arr.dtype.str}
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)


def load_dataset(directory) -> ToyDataset:
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    arrays = {}
    for name, info in manifest["arrays"].items():
        flat = np.loadtxt(os.path.join(directory, f"{name}.csv"), delimiter=",",
                          dtype=np.dtype(info["dtype"]), ndmin=2)
        arrays[name] = flat.reshape(info["shape"])
    return ToyDataset(manifest["task"], arrays["X_train"], arrays["y_train"], arrays["X_test"],
                      arrays["y_test"], manifest["seed"], X_ood=arrays.get("X_ood"),
                      n_classes=manifest["n_classes"])


def write_pgm(path, image, vmin: float | None = None, vmax: float | None = None) -> None:
    """Plain (P2) graymap of a 2D array, linearly mapped to 0..255."""
    a = np.asarray(image, dtype=float)
    if a.ndim != 2:
        raise ValueError("graymap needs a 2D array")
    lo = a.min() if vmin is None else vmin
    hi = a.max() if vmax is None else vmax
    g = np.zeros_like(a) if hi <= lo else (a - lo) / (hi - lo)
    g = np.clip(np.rint(255 * g), 0, 255).astype(int)
    with open(path, "w") as fh:
        fh.write(f"P2\n{a.shape[1]} {a.shape[0]}\n255\n")
        for row in g:
            fh.write(" ".join(map(str, row)) + "\n")


def read_pgm(path) -> np.ndarray:
    with open(path) as fh:
        tokens = [t for line in fh for t in line.split("#")[0].split()]
    if tokens[0] != "P2":
        raise ValueError("not a plain graymap")
    w, h, maxval = map(int, tokens[1:4])
    return np.array(tokens[4:4 + w * h], dtype=int).reshape(h, w) / maxval
