"""A small reverse-mode differentiation engine and the networks built on it.

``Tensor`` wraps a float64 array and records, for every operation, how to
push an upstream gradient back to each input.  The op vocabulary is just what
the variational networks and the training objective need; it is not a general
autodiff system.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFinite, ShapeMismatch


class Tensor:
    __slots__ = ("value", "grad", "_parents", "requires_grad")
    __array_ufunc__ = None      # make ndarray (op) Tensor defer to the reflected method

    def __init__(self, value, parents=(), requires_grad=False):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self._parents = parents
        self.requires_grad = requires_grad or any(p.requires_grad for p, _ in parents)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    def backward(self, seed=None):
        order, seen = [], set()

        def visit(t):
            stack = [(t, False)]
            while stack:
                node, done = stack.pop()
                if done:
                    order.append(node)
                    continue
                if id(node) in seen:
                    continue
                seen.add(id(node))
                stack.append((node, True))
                for parent, _ in node._parents:
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))

        visit(self)
        grads = {id(self): np.ones_like(self.value) if seed is None else np.asarray(seed, dtype=float)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, fn in node._parents:
                if parent.requires_grad:
                    pg = fn(g)
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        other = _lift(other)
        return Tensor(self.value + other.value,
                      ((self, lambda g: _unbroadcast(g, self.shape)),
                       (other, lambda g: _unbroadcast(g, other.shape))))

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.value, ((self, lambda g: -g),))

    def __sub__(self, other):
        return self + (-_lift(other))

    def __rsub__(self, other):
        return _lift(other) + (-self)

    def __mul__(self, other):
        other = _lift(other)
        a, b = self.value, other.value
        return Tensor(a * b, ((self, lambda g: _unbroadcast(g * b, a.shape)),
                              (other, lambda g: _unbroadcast(g * a, b.shape))))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other)
        a, b = self.value, other.value
        return Tensor(a / b, ((self, lambda g: _unbroadcast(g / b, a.shape)),
                              (other, lambda g: _unbroadcast(-g * a / (b * b), b.shape))))

    def __rtruediv__(self, other):
        return _lift(other) / self

    def __matmul__(self, other):
        other = _lift(other)
        a, b = self.value, other.value
        return Tensor(a @ b, ((self, lambda g: g @ b.T), (other, lambda g: a.T @ g)))

    def __getitem__(self, idx):
        shape = self.shape

        def back(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return out
        return Tensor(self.value[idx], ((self, back),))

    # shape ----------------------------------------------------------------
    def reshape(self, *shape):
        old = self.shape
        return Tensor(self.value.reshape(*shape), ((self, lambda g: g.reshape(old)),))

    def transpose(self, *axes):
        inv = np.argsort(axes)
        return Tensor(self.value.transpose(*axes), ((self, lambda g: g.transpose(*inv)),))

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape).copy()
        return Tensor(self.value.sum(axis=axis, keepdims=keepdims), ((self, back),))

    def mean(self, axis=None, keepdims=False):
        n = self.value.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis, keepdims) * (1.0 / n)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def param(value) -> Tensor:
    return Tensor(value, requires_grad=True)


# elementwise --------------------------------------------------------------
def exp(x: Tensor) -> Tensor:
    out = np.exp(x.value)
    return Tensor(out, ((x, lambda g: g * out),))


def log(x: Tensor) -> Tensor:
    v = x.value
    return Tensor(np.log(v), ((x, lambda g: g / v),))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.value)
    return Tensor(out, ((x, lambda g: g * 0.5 / out),))


def square(x: Tensor) -> Tensor:
    v = x.value
    return Tensor(v * v, ((x, lambda g: 2.0 * g * v),))


def abs_(x: Tensor) -> Tensor:
    v = x.value
    return Tensor(np.abs(v), ((x, lambda g: g * np.sign(v)),))


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    return Tensor(np.where(mask, x.value, 0.0), ((x, lambda g: g * mask),))


def softplus(x: Tensor) -> Tensor:
    v = x.value
    out = np.logaddexp(0.0, v)
    sig = 0.5 * (1.0 + np.tanh(0.5 * v))
    return Tensor(out, ((x, lambda g: g * sig),))


def softplus_inverse(y: float) -> float:
    return float(np.log(np.expm1(y)))


def where(mask, a: Tensor, b: Tensor) -> Tensor:
    """Select elementwise with a constant boolean ``mask``."""
    a, b = _lift(a), _lift(b)
    mask = np.asarray(mask, dtype=bool)
    return Tensor(np.where(mask, a.value, b.value),
                  ((a, lambda g: _unbroadcast(np.where(mask, g, 0.0), a.shape)),
                   (b, lambda g: _unbroadcast(np.where(mask, 0.0, g), b.shape))))


def log_softmax(x: Tensor, axis: int) -> Tensor:
    v = x.value
    m = v.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(v - m).sum(axis=axis, keepdims=True))
    out = v - lse
    soft = np.exp(out)
    return Tensor(out, ((x, lambda g: g - soft * g.sum(axis=axis, keepdims=True)),))


def einsum2(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum; every input index must appear in the output or the other operand."""
    a, b = _lift(a), _lift(b)
    ins, out = spec.split("->")
    sa, sb = ins.split(",")
    return Tensor(np.einsum(spec, a.value, b.value),
                  ((a, lambda g: np.einsum(f"{out},{sb}->{sa}", g, b.value)),
                   (b, lambda g: np.einsum(f"{sa},{out}->{sb}", a.value, g))))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def make(k):
        return lambda g: np.split(g, sizes, axis=axis)[k]
    return Tensor(np.concatenate([t.value for t in tensors], axis=axis),
                  tuple((t, make(k)) for k, t in enumerate(tensors)))


def diag_embed(x: Tensor) -> Tensor:
    """(B, P) -> (B, B, P) with x on the block diagonal."""
    B = x.shape[0]
    idx = np.arange(B)
    out = np.zeros((B, B) + x.shape[1:])
    out[idx, idx] = x.value
    return Tensor(out, ((x, lambda g: g[idx, idx]),))


# network layers -------------------------------------------------------------
def conv2d(x: Tensor, w: Tensor, b: Tensor, padding: int = 1) -> Tensor:
    """Stride-1 convolution, x: (N, C, H, W), w: (O, C, k, k), b: (O,)."""
    N, C, H, W = x.shape
    O, _, k, _ = w.shape
    padded = np.pad(x.value, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(padded, (k, k), axis=(2, 3))          # N, C, Ho, Wo, k, k
    Ho, Wo = win.shape[2:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * k * k)
    wmat = w.value.reshape(O, -1)
    out = (cols @ wmat.T + b.value).reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2)

    def back_x(g):
        gcols = g.transpose(0, 2, 3, 1).reshape(-1, O) @ wmat
        gcols = gcols.reshape(N, Ho, Wo, C, k, k)
        gpad = np.zeros_like(padded)
        for di in range(k):
            for dj in range(k):
                gpad[:, :, di:di + Ho, dj:dj + Wo] += gcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
        return gpad[:, :, padding:padding + H, padding:padding + W]

    def back_w(g):
        return (g.transpose(1, 0, 2, 3).reshape(O, -1) @ cols).reshape(w.shape)

    def back_b(g):
        return g.sum(axis=(0, 2, 3))

    return Tensor(out, ((x, back_x), (w, back_w), (b, back_b)))


def upsample_nearest(x: Tensor, scale: int) -> Tensor:
    N, C, H, W = x.shape
    out = x.value.repeat(scale, axis=2).repeat(scale, axis=3)
    return Tensor(out, ((x, lambda g: g.reshape(N, C, H, scale, W, scale).sum(axis=(3, 5))),))


@dataclass(frozen=True)
class Dense:
    n_out: int


@dataclass(frozen=True)
class Conv3x3:
    n_out: int


@dataclass(frozen=True)
class Act:
    kind: str = "relu"      # relu | identity


@dataclass(frozen=True)
class Upsample:
    scale: int = 2


class Net:
    """Feed-forward network over a fixed layer vocabulary.

    Dense layers flatten their input.  ``forward_count`` counts evaluated
    inputs (one per batch row) across all calls.
    """

    def __init__(self, layers, input_shape, seed: int = 0):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.seed = seed
        self.params: dict[str, np.ndarray] = {}
        self.forward_count = 0
        rng = np.random.default_rng(seed)
        shape = self.input_shape
        for k, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                fan_in = int(np.prod(shape))
                self.params[f"{k}.w"] = rng.normal(0, np.sqrt(2.0 / fan_in), (fan_in, layer.n_out))
                self.params[f"{k}.b"] = np.zeros(layer.n_out)
                shape = (layer.n_out,)
            elif isinstance(layer, Conv3x3):
                if len(shape) != 3:
                    raise ShapeMismatch("conv layer needs a (C, H, W) input")
                fan_in = shape[0] * 9
                self.params[f"{k}.w"] = rng.normal(0, np.sqrt(2.0 / fan_in), (layer.n_out, shape[0], 3, 3))
                self.params[f"{k}.b"] = np.zeros(layer.n_out)
                shape = (layer.n_out,) + shape[1:]
            elif isinstance(layer, Upsample):
                shape = (shape[0], shape[1] * layer.scale, shape[2] * layer.scale)
            elif not isinstance(layer, Act):
                raise ValueError(f"unsupported layer {layer!r}")
        self.output_shape = shape

    def apply(self, params: dict, x) -> Tensor:
        x = _lift(x)
        if x.shape[1:] != self.input_shape:
            raise ShapeMismatch(f"input shape {x.shape[1:]} != {self.input_shape}")
        self.forward_count += x.shape[0]
        h = x
        for k, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                if h.ndim != 2:
                    h = h.reshape(h.shape[0], -1)
                h = h @ params[f"{k}.w"] + params[f"{k}.b"]
            elif isinstance(layer, Conv3x3):
                h = conv2d(h, params[f"{k}.w"], params[f"{k}.b"])
            elif isinstance(layer, Upsample):
                h = upsample_nearest(h, layer.scale)
            elif layer.kind == "relu":
                h = relu(h)
        return h

    def forward(self, x) -> np.ndarray:
        const = {k: Tensor(v) for k, v in self.params.items()}
        return self.apply(const, x).value

    def param_tensors(self) -> dict:
        return {k: param(v) for k, v in self.params.items()}


def forward(net: Net, x) -> np.ndarray:
    return net.forward(x)


def grad(net: Net, objective, x):
    """Value and parameter gradients of ``objective(outputs) -> scalar Tensor``."""
    params = net.param_tensors()
    value = objective(net.apply(params, x))
    value.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.value)) for k, t in params.items()}
    check_finite(grads)
    return float(value.value), grads


def check_finite(grads: dict):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFinite(f"gradient of '{name}' is not finite")


def sgd_step(params: dict, grads: dict, lr: float, weight_decay: float = 0.0,
             momentum: float = 0.0, state: dict | None = None) -> dict:
    """Momentum SGD with coupled weight decay: buf = m * buf + (g + wd * p); p -= lr * buf.

    ``state`` holds the momentum buffers and is updated in place.  Returns the
    new parameter dict (input arrays are not modified).
    """
    if state is None:
        state = {}
    new = {}
    for name, p in params.items():
        if p.shape != grads[name].shape:
            raise ShapeMismatch(f"gradient shape mismatch for '{name}'")
        d = grads[name] + weight_decay * p
        if momentum:
            buf = state.get(name)
            buf = d.copy() if buf is None else momentum * buf + d
            state[name] = buf
            d = buf
        new[name] = p - lr * d
    return new


CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict, meta: dict | None = None) -> None:
    """Write parameters to an ``.npz`` archive with a JSON shape manifest.

    The manifest (``__manifest__``) records the format version, parameter
    names in order with their shapes, and any extra metadata.  Arrays are
    stored as raw float64 so loading is bit-exact.
    """
    manifest = {"version": CHECKPOINT_VERSION,
                "params": [[k, list(v.shape)] for k, v in params.items()],
                "meta": meta or {}}
    arrays = {f"p{i}": np.asarray(v, dtype=np.float64) for i, v in enumerate(params.values())}
    with open(path, "wb") as fh:
        np.savez(fh, __manifest__=np.frombuffer(json.dumps(manifest).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path):
    with np.load(path) as data:
        manifest = json.loads(bytes(data["__manifest__"]).decode())
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
        params = {}
        for i, (name, shape) in enumerate(manifest["params"]):
            arr = data[f"p{i}"]
            if list(arr.shape) != shape:
                raise ShapeMismatch(f"checkpoint entry '{name}' has shape {arr.shape}, manifest says {shape}")
            params[name] = arr.copy()
    return params, manifest["meta"]
