"""Minimal dense-tensor neural-network engine (numpy, float64).

Implements exactly what the denoising autoencoder and the parameter
regressor need: strided 2-D convolution with "same-ceil" padding, its exact
adjoint (transposed convolution), batch normalization, ReLU, sigmoid, dense
layers, mean-squared-error loss, reverse-mode gradients for all of the
above, and an adaptive-moment optimizer.

Array layout is channels-last: activations are ``(batch, height, width,
channels)`` for spatial layers and ``(batch, features)`` for dense layers.
Convolution weights are ``(k, k, in_channels, out_channels)``; transposed
convolution weights are ``(k, k, out_channels, in_channels)`` so that the
operation is the exact adjoint of a convolution with identical geometry.

"same-ceil" padding: output size is ``ceil(size / stride)`` and the surplus
zero padding goes on the bottom/right edge.

Everything runs in float64 and is deterministic given the seeds; two models
trained in one process with the same seeds produce identical weights.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SCHEMA_VERSION = 1


class TrainingDivergenceError(RuntimeError):
    """Raised when a non-finite value shows up in a loss or gradient."""


# ---------------------------------------------------------------------------
# functional convolution core

def _pad_amounts(size: int, k: int, stride: int) -> tuple:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    lo = total // 2
    return lo, total - lo, out


def _im2col(x: np.ndarray, k: int, stride: int) -> tuple:
    """Gather convolution windows into a (B*oh*ow, k*k*C) matrix."""
    b, h, w, c = x.shape
    ph_lo, ph_hi, oh = _pad_amounts(h, k, stride)
    pw_lo, pw_hi, ow = _pad_amounts(w, k, stride)
    xp = np.pad(x, ((0, 0), (ph_lo, ph_hi), (pw_lo, pw_hi), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    win = win[:, :oh, :ow]  # (B, oh, ow, C, k, k)
    col = np.ascontiguousarray(np.moveaxis(win, 3, 5)).reshape(b * oh * ow, k * k * c)
    meta = (x.shape, xp.shape, (ph_lo, pw_lo), (oh, ow))
    return col, meta


def _col2im(dcol: np.ndarray, meta: tuple, k: int, stride: int) -> np.ndarray:
    """Scatter-add the adjoint of :func:`_im2col`."""
    (b, h, w, c), padded_shape, (ph_lo, pw_lo), (oh, ow) = meta
    dxp = np.zeros(padded_shape)
    d = dcol.reshape(b, oh, ow, k, k, c)
    for u in range(k):
        for v in range(k):
            dxp[:, u : u + stride * oh : stride, v : v + stride * ow : stride, :] += d[:, :, :, u, v, :]
    return dxp[:, ph_lo : ph_lo + h, pw_lo : pw_lo + w, :]


def conv2d(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None = None, stride: int = 1) -> np.ndarray:
    """Cross-correlation with same-ceil padding; returns (B, oh, ow, Cout)."""
    y, _ = _conv2d_forward(x, weights, bias, stride)
    return y


def _conv2d_forward(x, weights, bias, stride):
    k, k2, cin, cout = weights.shape
    if k != k2:
        raise ValueError("kernel must be square")
    if x.shape[-1] != cin:
        raise ValueError(f"expected {cin} input channels, got {x.shape[-1]}")
    col, meta = _im2col(x, k, stride)
    y = col @ weights.reshape(-1, cout)
    if bias is not None:
        y += bias
    b = x.shape[0]
    oh, ow = meta[3]
    return y.reshape(b, oh, ow, cout), (col, meta)


def conv_transpose2d(
    y: np.ndarray, weights: np.ndarray, bias: np.ndarray | None = None, stride: int = 1
) -> np.ndarray:
    """Exact adjoint of :func:`conv2d` with the same kernel/stride/padding.

    Input ``(B, h, w, Cin)`` maps to ``(B, stride*h, stride*w, Cout)`` with
    weights ``(k, k, Cout, Cin)``.
    """
    out, _ = _conv_transpose2d_forward(y, weights, bias, stride)
    return out


def _adjoint_meta(out_spatial: tuple, batch: int, k: int, stride: int, cout: int) -> tuple:
    h, w = out_spatial
    ph_lo, ph_hi, oh = _pad_amounts(h, k, stride)
    pw_lo, pw_hi, ow = _pad_amounts(w, k, stride)
    padded_shape = (batch, h + ph_lo + ph_hi, w + pw_lo + pw_hi, cout)
    return ((batch, h, w, cout), padded_shape, (ph_lo, pw_lo), (oh, ow))


def _conv_transpose2d_forward(y, weights, bias, stride):
    k, k2, cout, cin = weights.shape
    if k != k2:
        raise ValueError("kernel must be square")
    if y.shape[-1] != cin:
        raise ValueError(f"expected {cin} input channels, got {y.shape[-1]}")
    b, h, w, _ = y.shape
    meta = _adjoint_meta((stride * h, stride * w), b, k, stride, cout)
    if meta[3] != (h, w):
        raise ValueError("inconsistent transposed-convolution geometry")
    dcol = y.reshape(-1, cin) @ weights.reshape(-1, cin).T
    out = _col2im(dcol, meta, k, stride)
    if bias is not None:
        out = out + bias
    return out, (y, meta)


# ---------------------------------------------------------------------------
# layers

class Layer:
    kind = "layer"

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def parameters(self) -> dict:
        return {}

    def gradients(self) -> dict:
        return {}

    def state_arrays(self) -> dict:
        """All persistent arrays (parameters plus running statistics)."""
        return self.parameters()

    def spec(self) -> dict:
        return {"kind": self.kind}


class Conv2D(Layer):
    kind = "conv"

    def __init__(self, kernel: int, in_channels: int, out_channels: int, stride: int = 1, rng=None):
        if not 1 <= kernel <= 7:
            raise ValueError("kernel size must be in 1..7")
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        self.kernel = kernel
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        limit = 1.0 / math.sqrt(kernel * kernel * in_channels)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.w = rng.uniform(-limit, limit, size=(kernel, kernel, in_channels, out_channels))
        self.b = np.zeros(out_channels)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._cache = None

    def forward(self, x, train=False):
        y, self._cache = _conv2d_forward(x, self.w, self.b, self.stride)
        return y

    def backward(self, grad):
        col, meta = self._cache
        dy_flat = grad.reshape(-1, self.out_channels)
        self.dw = (col.T @ dy_flat).reshape(self.w.shape)
        self.db = dy_flat.sum(axis=0)
        dcol = dy_flat @ self.w.reshape(-1, self.out_channels).T
        return _col2im(dcol, meta, self.kernel, self.stride)

    def parameters(self):
        return {"w": self.w, "b": self.b}

    def gradients(self):
        return {"w": self.dw, "b": self.db}

    def spec(self):
        return {
            "kind": self.kind,
            "kernel": self.kernel,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "stride": self.stride,
        }


class ConvTranspose2D(Layer):
    kind = "tconv"

    def __init__(self, kernel: int, in_channels: int, out_channels: int, stride: int = 1, rng=None):
        if not 1 <= kernel <= 7:
            raise ValueError("kernel size must be in 1..7")
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        self.kernel = kernel
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        limit = 1.0 / math.sqrt(kernel * kernel * in_channels)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.w = rng.uniform(-limit, limit, size=(kernel, kernel, out_channels, in_channels))
        self.b = np.zeros(out_channels)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._cache = None

    def forward(self, x, train=False):
        y, self._cache = _conv_transpose2d_forward(x, self.w, self.b, self.stride)
        return y

    def backward(self, grad):
        y, meta = self._cache
        col, _ = _im2col(grad, self.kernel, self.stride)
        dy = (col @ self.w.reshape(-1, self.in_channels)).reshape(y.shape)
        self.dw = (col.T @ y.reshape(-1, self.in_channels)).reshape(self.w.shape)
        self.db = grad.sum(axis=(0, 1, 2))
        return dy

    def parameters(self):
        return {"w": self.w, "b": self.b}

    def gradients(self):
        return {"w": self.dw, "b": self.db}

    def spec(self):
        return {
            "kind": self.kind,
            "kernel": self.kernel,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "stride": self.stride,
        }


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.9):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.dgamma = np.zeros(channels)
        self.dbeta = np.zeros(channels)
        self._cache = None

    def _axes(self, x):
        return tuple(range(x.ndim - 1))

    def forward(self, x, train=False):
        axes = self._axes(x)
        if train:
            if x.shape[0] < 2:
                raise ValueError("batch normalization needs batch size >= 2 in train mode")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.running_mean = self.momentum * self.running_mean + (1 - self.momentum) * mean
            self.running_var = self.momentum * self.running_var + (1 - self.momentum) * var
        else:
            mean = self.running_mean
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        self._cache = (xhat, inv_std, train, x.shape)
        return self.gamma * xhat + self.beta

    def backward(self, grad):
        xhat, inv_std, train, shape = self._cache
        axes = self._axes(grad)
        self.dgamma = (grad * xhat).sum(axis=axes)
        self.dbeta = grad.sum(axis=axes)
        dxhat = grad * self.gamma
        if not train:
            return dxhat * inv_std
        n = np.prod([shape[a] for a in axes])
        return (inv_std / n) * (n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))

    def parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def gradients(self):
        return {"gamma": self.dgamma, "beta": self.dbeta}

    def state_arrays(self):
        return {
            "gamma": self.gamma,
            "beta": self.beta,
            "running_mean": self.running_mean,
            "running_var": self.running_var,
        }

    def spec(self):
        return {"kind": self.kind, "channels": self.channels, "eps": self.eps, "momentum": self.momentum}


class ReLU(Layer):
    kind = "relu"

    def __init__(self):
        self._mask = None

    def forward(self, x, train=False):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad):
        return np.where(self._mask, grad, 0.0)


class Sigmoid(Layer):
    kind = "sigmoid"

    def __init__(self):
        self._out = None

    def forward(self, x, train=False):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        self._out = out
        return out

    def backward(self, grad):
        return grad * self._out * (1.0 - self._out)


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features: int, out_features: int, rng=None):
        self.in_features = in_features
        self.out_features = out_features
        limit = 1.0 / math.sqrt(in_features)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.w = rng.uniform(-limit, limit, size=(in_features, out_features))
        self.b = np.zeros(out_features)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._x = None

    def forward(self, x, train=False):
        self._x = x
        return x @ self.w + self.b

    def backward(self, grad):
        self.dw = self._x.T @ grad
        self.db = grad.sum(axis=0)
        return grad @ self.w.T

    def parameters(self):
        return {"w": self.w, "b": self.b}

    def gradients(self):
        return {"w": self.dw, "b": self.db}

    def spec(self):
        return {"kind": self.kind, "in_features": self.in_features, "out_features": self.out_features}


LAYER_KINDS = {cls.kind: cls for cls in (Conv2D, ConvTranspose2D, BatchNorm, ReLU, Sigmoid, Dense)}


def layer_from_spec(spec: dict) -> Layer:
    kind = spec["kind"]
    if kind == "conv":
        return Conv2D(spec["kernel"], spec["in_channels"], spec["out_channels"], spec["stride"])
    if kind == "tconv":
        return ConvTranspose2D(spec["kernel"], spec["in_channels"], spec["out_channels"], spec["stride"])
    if kind == "batchnorm":
        return BatchNorm(spec["channels"], spec.get("eps", 1e-5), spec.get("momentum", 0.9))
    if kind == "relu":
        return ReLU()
    if kind == "sigmoid":
        return Sigmoid()
    if kind == "dense":
        return Dense(spec["in_features"], spec["out_features"])
    raise ValueError(f"unknown layer kind {kind!r}")


class Model:
    """A plain sequential stack of layers."""

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def parameters(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.parameters().items():
                out[f"{i}.{name}"] = arr
        return out

    def gradients(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.gradients().items():
                out[f"{i}.{name}"] = arr
        return out

    def state_arrays(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.state_arrays().items():
                out[f"{i}.{name}"] = arr
        return out

    def load_state(self, state: dict) -> None:
        own = self.state_arrays()
        if set(own) != set(state):
            raise ValueError("model state keys do not match")
        # copy in place so optimizers bound to the parameter arrays stay valid
        for i, layer in enumerate(self.layers):
            for name in layer.state_arrays():
                target = getattr(layer, name)
                target[...] = np.asarray(state[f"{i}.{name}"]).reshape(target.shape)

    def copy_state(self) -> dict:
        return {k: v.copy() for k, v in self.state_arrays().items()}

    def spec(self) -> list:
        return [layer.spec() for layer in self.layers]


# ---------------------------------------------------------------------------
# loss and optimizer

def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple:
    """Mean-squared error over every element, with its gradient."""
    diff = pred - target
    loss = float(np.mean(diff * diff))
    return loss, (2.0 / diff.size) * diff


class Adam:
    """Adaptive-moment stochastic optimizer over a named parameter dict."""

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for key, p in self.params.items():
            g = grads[key]
            self.m[key] = self.beta1 * self.m[key] + (1 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1 - self.beta2) * (g * g)
            p -= self.lr * (self.m[key] / b1c) / (np.sqrt(self.v[key] / b2c) + self.eps)


def train_step(model: Model, batch_in: np.ndarray, batch_target: np.ndarray, optimizer: Adam) -> float:
    """One forward/backward/update pass; returns the MSE loss.

    Aborts with :class:`TrainingDivergenceError` if the loss or any
    gradient stops being finite.
    """
    pred = model.forward(batch_in, train=True)
    loss, dpred = mse_loss(pred, batch_target)
    if not np.isfinite(loss):
        raise TrainingDivergenceError(f"non-finite loss {loss}")
    model.backward(dpred)
    grads = model.gradients()
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient in parameter {name}")
    optimizer.step(grads)
    return loss


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator):
    """Yield index arrays covering 0..n-1 in a seeded shuffled order."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


# ---------------------------------------------------------------------------
# serialization

def _encode_array(arr: np.ndarray) -> dict:
    data = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "data": base64.b64encode(data.tobytes()).decode("ascii")}


def _decode_array(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(obj["shape"]).astype(float)


def model_to_dict(model: Model, meta: dict | None = None) -> dict:
    out = {
        "schema_version": SCHEMA_VERSION,
        "layers": model.spec(),
        "state": {k: _encode_array(v) for k, v in model.state_arrays().items()},
    }
    if meta:
        out["meta"] = meta
    return out


def model_from_dict(obj: dict) -> tuple:
    if obj.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported model schema {obj.get('schema_version')}")
    model = Model([layer_from_spec(s) for s in obj["layers"]])
    model.load_state({k: _decode_array(v) for k, v in obj["state"].items()})
    return model, obj.get("meta", {})


def save_model(model: Model, path, meta: dict | None = None) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model, meta), fh, sort_keys=True)
        fh.write("\n")


def load_model(path) -> tuple:
    with open(path) as fh:
        return model_from_dict(json.load(fh))
