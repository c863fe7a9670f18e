"""Minimal differentiable network core.

Implements just the pieces the OOK receiver CNNs need: 1-D/2-D convolutions
with 'same' zero padding and stride 1, dense layers, ReLU/Sigmoid/Flatten,
binary cross-entropy, and ADAM. Everything runs on float64 numpy arrays so
quantization experiments are not confounded by float32 rounding.

Parameter tensors are addressed by stable string names ("conv1.kernel",
"dense1.bias", ...). Gradients, ADAM moments, Lagrange multipliers and
quantized copies all use the same name->array dict convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np


class ShapeError(ValueError):
    """Raised when a batch does not fit a layer; names the layer and shapes."""

    def __init__(self, layer, expected, actual):
        self.layer = layer
        self.expected = expected
        self.actual = actual
        super().__init__(f"{layer}: expected input {expected}, got {actual}")


BCE_CLAMP = 1e-12  # probabilities are clamped to [BCE_CLAMP, 1-BCE_CLAMP] inside the loss


# ---------------------------------------------------------------------------
# layer specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer, serializable to/from dicts.

    kind is one of conv1d, conv2d, dense, relu, sigmoid, flatten. Convs carry
    in_channels/filters/kernel_size; dense carries in_dim/out_dim.
    """

    kind: str
    in_channels: int | None = None
    filters: int | None = None
    kernel_size: tuple | None = None
    in_dim: int | None = None
    out_dim: int | None = None

    def to_dict(self):
        d = {k: v for k, v in asdict(self).items() if v is not None}
        if self.kernel_size is not None:
            d["kernel_size"] = list(self.kernel_size)
        return d

    @staticmethod
    def from_dict(d):
        d = dict(d)
        if "kernel_size" in d:
            d["kernel_size"] = tuple(d["kernel_size"])
        return LayerSpec(**d)


def _same_pad(k):
    # 'same' padding for stride 1: output length equals input length
    return (k - 1) // 2, k // 2


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Layer:
    """Base class. Layers cache what backward needs during forward."""

    name = "layer"

    def __init__(self, spec):
        self.spec = spec
        self.params = {}

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout):
        """Return (dx, grads) with grads keyed like self.params."""
        raise NotImplementedError


class Conv1D(Layer):
    """1-D convolution over (B, C, L), stride 1, 'same' zero padding.

    Also accepts (B, L) when in_channels == 1 and inserts the channel axis,
    which is how the SISO receiver feeds its length-L blocks.
    """

    def __init__(self, spec, rng):
        super().__init__(spec)
        c_in, c_out = spec.in_channels, spec.filters
        (k,) = spec.kernel_size
        bound = math.sqrt(6.0 / (c_in * k))
        self.params = {
            "kernel": rng.uniform(-bound, bound, size=(c_out, c_in, k)),
            "bias": np.zeros(c_out),
        }
        self._k = k

    def _columns(self, x):
        # (B, C, L) -> (B, C*K, L) with zero padding so length is preserved
        pl, pr = _same_pad(self._k)
        xp = np.pad(x, ((0, 0), (0, 0), (pl, pr)))
        length = x.shape[2]
        cols = [xp[:, :, k : k + length] for k in range(self._k)]
        # stack as (B, C, K, L) then merge C and K
        col = np.stack(cols, axis=2)
        return col.reshape(x.shape[0], -1, length)

    def forward(self, x):
        squeeze = False
        if x.ndim == 2 and self.spec.in_channels == 1:
            x = x[:, None, :]
            squeeze = True
        if x.ndim != 3 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(self.name, f"(B, {self.spec.in_channels}, L)", x.shape)
        self._squeeze = squeeze
        self._col = self._columns(x)
        w2 = self.params["kernel"].reshape(self.spec.filters, -1)
        out = np.matmul(w2, self._col) + self.params["bias"][:, None]
        return out

    def backward(self, dout):
        w2 = self.params["kernel"].reshape(self.spec.filters, -1)
        dw2 = np.tensordot(dout, self._col, axes=([0, 2], [0, 2]))
        db = dout.sum(axis=(0, 2))
        dcol = np.matmul(w2.T, dout)  # (B, C*K, L)
        b, _, length = dcol.shape
        dcol = dcol.reshape(b, self.spec.in_channels, self._k, length)
        pl, pr = _same_pad(self._k)
        dxp = np.zeros((b, self.spec.in_channels, length + pl + pr))
        for k in range(self._k):
            dxp[:, :, k : k + length] += dcol[:, :, k, :]
        dx = dxp[:, :, pl : pl + length]
        if self._squeeze:
            dx = dx[:, 0, :]
        return dx, {"kernel": dw2.reshape(self.params["kernel"].shape), "bias": db}


class Conv2D(Layer):
    """2-D convolution over (B, C, H, W), stride 1, 'same' zero padding.

    Accepts (B, H, W) when in_channels == 1 (the SIMO M x L input blocks).
    """

    def __init__(self, spec, rng):
        super().__init__(spec)
        c_in, c_out = spec.in_channels, spec.filters
        kh, kw = spec.kernel_size
        bound = math.sqrt(6.0 / (c_in * kh * kw))
        self.params = {
            "kernel": rng.uniform(-bound, bound, size=(c_out, c_in, kh, kw)),
            "bias": np.zeros(c_out),
        }
        self._kh, self._kw = kh, kw

    def _columns(self, x):
        ph = _same_pad(self._kh)
        pw = _same_pad(self._kw)
        xp = np.pad(x, ((0, 0), (0, 0), ph, pw))
        b, c, h, w = x.shape
        cols = []
        for i in range(self._kh):
            for j in range(self._kw):
                cols.append(xp[:, :, i : i + h, j : j + w].reshape(b, c, h * w))
        col = np.stack(cols, axis=2)  # (B, C, KH*KW, H*W)
        return col.reshape(b, c * self._kh * self._kw, h * w)

    def forward(self, x):
        squeeze = False
        if x.ndim == 3 and self.spec.in_channels == 1:
            x = x[:, None, :, :]
            squeeze = True
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(self.name, f"(B, {self.spec.in_channels}, H, W)", x.shape)
        self._squeeze = squeeze
        self._hw = x.shape[2:]
        self._col = self._columns(x)
        w2 = self.params["kernel"].reshape(self.spec.filters, -1)
        out = np.matmul(w2, self._col) + self.params["bias"][:, None]
        b = x.shape[0]
        return out.reshape(b, self.spec.filters, *self._hw)

    def backward(self, dout):
        b = dout.shape[0]
        h, w = self._hw
        dflat = dout.reshape(b, self.spec.filters, h * w)
        w2 = self.params["kernel"].reshape(self.spec.filters, -1)
        dw2 = np.tensordot(dflat, self._col, axes=([0, 2], [0, 2]))
        db = dflat.sum(axis=(0, 2))
        dcol = np.matmul(w2.T, dflat)
        dcol = dcol.reshape(b, self.spec.in_channels, self._kh * self._kw, h, w)
        ph = _same_pad(self._kh)
        pw = _same_pad(self._kw)
        dxp = np.zeros((b, self.spec.in_channels, h + sum(ph), w + sum(pw)))
        idx = 0
        for i in range(self._kh):
            for j in range(self._kw):
                dxp[:, :, i : i + h, j : j + w] += dcol[:, :, idx]
                idx += 1
        dx = dxp[:, :, ph[0] : ph[0] + h, pw[0] : pw[0] + w]
        if self._squeeze:
            dx = dx[:, 0]
        return dx, {"kernel": dw2.reshape(self.params["kernel"].shape), "bias": db}


class Dense(Layer):
    def __init__(self, spec, rng):
        super().__init__(spec)
        bound = math.sqrt(6.0 / spec.in_dim)
        self.params = {
            "kernel": rng.uniform(-bound, bound, size=(spec.in_dim, spec.out_dim)),
            "bias": np.zeros(spec.out_dim),
        }

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.spec.in_dim:
            raise ShapeError(self.name, f"(B, {self.spec.in_dim})", x.shape)
        self._x = x
        return x @ self.params["kernel"] + self.params["bias"]

    def backward(self, dout):
        dw = self._x.T @ dout
        db = dout.sum(axis=0)
        dx = dout @ self.params["kernel"].T
        return dx, {"kernel": dw, "bias": db}


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dout):
        return dout * self._mask, {}


class Sigmoid(Layer):
    def forward(self, x):
        # split by sign to avoid overflow in exp
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        self._out = out
        return out

    def backward(self, dout):
        return dout * self._out * (1.0 - self._out), {}


class Flatten(Layer):
    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape), {}


_LAYER_KINDS = {
    "conv1d": Conv1D,
    "conv2d": Conv2D,
    "dense": Dense,
    "relu": ReLU,
    "sigmoid": Sigmoid,
    "flatten": Flatten,
}


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

class Network:
    """Ordered stack of layers with named parameter tensors.

    quantizable marks which parameter tensors the compression stage may touch;
    by default kernels are quantizable and biases are not.
    """

    def __init__(self, specs, rng=None, quantize_biases=False):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.specs = list(specs)
        self.layers = []
        self.quantizable = {}
        counts = {}
        for spec in self.specs:
            cls = _LAYER_KINDS[spec.kind]
            layer = cls(spec, rng) if spec.kind in ("conv1d", "conv2d", "dense") else cls(spec)
            counts[spec.kind] = counts.get(spec.kind, 0) + 1
            layer.name = f"{spec.kind}{counts[spec.kind]}"
            self.layers.append(layer)
            for pname in layer.params:
                full = f"{layer.name}.{pname}"
                self.quantizable[full] = pname == "kernel" or quantize_biases

    # -- parameter access -------------------------------------------------

    def params(self):
        """name -> array view of every parameter tensor."""
        out = {}
        for layer in self.layers:
            for pname, arr in layer.params.items():
                out[f"{layer.name}.{pname}"] = arr
        return out

    def set_params(self, values):
        for layer in self.layers:
            for pname in layer.params:
                full = f"{layer.name}.{pname}"
                if full in values:
                    arr = np.asarray(values[full], dtype=np.float64)
                    if arr.shape != layer.params[pname].shape:
                        raise ShapeError(full, layer.params[pname].shape, arr.shape)
                    layer.params[pname] = arr.copy()

    def copy(self):
        clone = Network(self.specs, rng=np.random.default_rng(0))
        clone.set_params(self.params())
        clone.quantizable = dict(self.quantizable)
        return clone

    # -- execution ---------------------------------------------------------

    def forward(self, x):
        out = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            out = layer.forward(out)
        return out

    def training_step(self, batch, target, extra_grad=None):
        """One forward/backward pass; returns (loss, grads dict)."""
        probs = self.forward(batch)
        loss = bce_loss(probs, target)
        dout = _bce_grad(probs, np.asarray(target, dtype=np.float64))
        grads = {}
        for layer in reversed(self.layers):
            dout, layer_grads = layer.backward(dout)
            for pname, g in layer_grads.items():
                grads[f"{layer.name}.{pname}"] = g
        if extra_grad is not None:
            for name, g in extra_grad.items():
                if g.shape != grads[name].shape:
                    raise ShapeError(name, grads[name].shape, g.shape)
                grads[name] = grads[name] + g
        return loss, grads


def forward(net, batch):
    """Run the network on a batch; returns the (B, L) probability tensor."""
    return net.forward(batch)


def backward(net, batch, target, extra_grad=None):
    """Gradient of bce_loss(forward(net, batch), target) for every parameter.

    extra_grad (same name->array layout) is added elementwise; the compression
    stage uses it to inject the quadratic-penalty gradient.
    """
    _, grads = net.training_step(batch, target, extra_grad)
    return grads


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def bce_loss(pred, target):
    """Mean binary cross-entropy; pred clamped away from {0,1} before the logs."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError("bce_loss", pred.shape, target.shape)
    if not np.isin(target, (0.0, 1.0)).all():
        raise ValueError("bce_loss: target entries must be 0 or 1")
    p = np.clip(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return float(-np.mean(target * np.log(p) + (1.0 - target) * np.log1p(-p)))


def _bce_grad(pred, target):
    # derivative of the clamped mean BCE w.r.t. pred; zero where the clamp is active
    p = np.clip(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    g = (p - target) / (p * (1.0 - p)) / pred.size
    g[(pred < BCE_CLAMP) | (pred > 1.0 - BCE_CLAMP)] = 0.0
    return g


# ---------------------------------------------------------------------------
# ADAM
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @staticmethod
    def for_params(params, **hyper):
        state = AdamState(**hyper)
        state.m = {k: np.zeros_like(p) for k, p in params.items()}
        state.v = {k: np.zeros_like(p) for k, p in params.items()}
        return state


def adam_step(state, params, grads):
    """Standard bias-corrected ADAM update, in place; returns (params, state)."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(name, p.shape, g.shape)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# receiver architectures
# ---------------------------------------------------------------------------

def siso_cnn_specs(block_len, filters=(32, 64, 128), kernel_size=3):
    """Three 1-D conv layers (ReLU) then dense block_len + sigmoid."""
    specs = []
    c_in = 1
    for f in filters:
        specs.append(LayerSpec("conv1d", in_channels=c_in, filters=f, kernel_size=(kernel_size,)))
        specs.append(LayerSpec("relu"))
        c_in = f
    specs.append(LayerSpec("flatten"))
    specs.append(LayerSpec("dense", in_dim=c_in * block_len, out_dim=block_len))
    specs.append(LayerSpec("sigmoid"))
    return specs


def simo_cnn_specs(antennas, block_len, filters=(32, 64, 128), kernel_size=(3, 3)):
    """Three 2-D conv layers (ReLU) over the M x L block, dense block_len + sigmoid."""
    specs = []
    c_in = 1
    for f in filters:
        specs.append(LayerSpec("conv2d", in_channels=c_in, filters=f, kernel_size=tuple(kernel_size)))
        specs.append(LayerSpec("relu"))
        c_in = f
    specs.append(LayerSpec("flatten"))
    specs.append(LayerSpec("dense", in_dim=c_in * antennas * block_len, out_dim=block_len))
    specs.append(LayerSpec("sigmoid"))
    return specs


def build_network(specs, seed=0, quantize_biases=False):
    return Network(specs, rng=np.random.default_rng(seed), quantize_biases=quantize_biases)
