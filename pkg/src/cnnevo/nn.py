"""Minimal CNN engine: layers, forward/backward passes, loss and minibatch SGD.

Activations are NCHW arrays.  Every layer caches what its backward pass
needs during a training-mode forward pass.  Conv and fully connected
layers accept an optional :class:`~cnnevo.fxq.FxFormat`; when given, each
scalar product of the layer is computed by the emulated fixed-point
multiplier while the accumulation and bias stay in floating point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import StructuralError, TrainingDiverged
from .fxq import FxFormat, parse_mode, quantize

VALID, SAME = "valid", "same"
MAX, AVERAGE = "max", "average"

LOG_EPS = 1e-12


def glorot_uniform(rng, shape, fan_in, fan_out, dtype=np.float32):
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape).astype(dtype)


def conv_output_size(size, kernel_size, stride, padding):
    if padding == SAME:
        return -(-size // stride)
    return (size - kernel_size) // stride + 1


def same_padding(size, kernel_size, stride):
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel_size - size, 0)
    return total // 2, total - total // 2


# --------------------------------------------------------------------------
# Layers
# --------------------------------------------------------------------------


class Layer:
    """Base class; parameterless layers only override what they need."""

    kind = "layer"

    def params(self):
        return {}

    def grads(self):
        return {}

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x, training=False, fmt=None):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def astype(self, dtype):
        for name, value in self.params().items():
            setattr(self, name, value.astype(dtype))
        return self

    def num_params(self):
        return sum(p.size for p in self.params().values())


class Conv2D(Layer):
    kind = "conv"

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=VALID,
                 weight=None, bias=None, rng=None, dtype=np.float32):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        if weight is None:
            rng = rng if rng is not None else np.random.default_rng()
            k2 = kernel_size * kernel_size
            weight = glorot_uniform(rng, shape, in_channels * k2, out_channels * k2, dtype)
        if bias is None:
            bias = np.zeros(out_channels, dtype=dtype)
        if weight.shape != shape or bias.shape != (out_channels,):
            raise StructuralError(f"conv weight {weight.shape} / bias {bias.shape} do not match {shape}")
        self.weight = np.asarray(weight)
        self.bias = np.asarray(bias)
        self.grad_weight = None
        self.grad_bias = None
        self._cache = None

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def grads(self):
        return {"weight": self.grad_weight, "bias": self.grad_bias}

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise StructuralError(f"conv expects {self.in_channels} channels, got {c}")
        ho = conv_output_size(h, self.kernel_size, self.stride, self.padding)
        wo = conv_output_size(w, self.kernel_size, self.stride, self.padding)
        if ho < 1 or wo < 1:
            raise StructuralError(f"conv k={self.kernel_size} s={self.stride} underflows {h}x{w} input")
        return (self.out_channels, ho, wo)

    def forward(self, x, training=False, fmt=None):
        out, cache = conv_forward(x, self, fmt if not training else None, return_cache=True)
        self._cache = cache if training else None
        return out

    def backward(self, grad):
        gx, self.grad_weight, self.grad_bias = conv_backward(grad, self._cache[0], self, cols=self._cache[1])
        return gx


class BatchNorm2D(Layer):
    kind = "batchnorm"

    def __init__(self, channels, momentum=0.99, epsilon=1e-5, gamma=None, beta=None,
                 running_mean=None, running_var=None, dtype=np.float32):
        self.channels = channels
        self.momentum = momentum
        self.epsilon = epsilon
        self.gamma = np.ones(channels, dtype) if gamma is None else np.asarray(gamma)
        self.beta = np.zeros(channels, dtype) if beta is None else np.asarray(beta)
        self.running_mean = np.zeros(channels, dtype) if running_mean is None else np.asarray(running_mean)
        self.running_var = np.ones(channels, dtype) if running_var is None else np.asarray(running_var)
        for name in ("gamma", "beta", "running_mean", "running_var"):
            if getattr(self, name).shape != (channels,):
                raise StructuralError(f"batchnorm {name} shape {getattr(self, name).shape} != ({channels},)")
        self.grad_gamma = None
        self.grad_beta = None
        self._cache = None

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def grads(self):
        return {"gamma": self.grad_gamma, "beta": self.grad_beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def astype(self, dtype):
        super().astype(dtype)
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)
        return self

    def output_shape(self, in_shape):
        if in_shape[0] != self.channels:
            raise StructuralError(f"batchnorm expects {self.channels} channels, got {in_shape[0]}")
        return tuple(in_shape)

    def forward(self, x, training=False, fmt=None):
        out, cache = batchnorm_forward(x, self, training)
        self._cache = cache
        return out

    def backward(self, grad):
        gx, self.grad_gamma, self.grad_beta = batchnorm_backward(grad, self._cache, self)
        return gx


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=False, fmt=None):
        if training:
            self._mask = x > 0
        return relu(x)

    def backward(self, grad):
        return grad * self._mask


class Pool2D(Layer):
    kind = "pool"

    def __init__(self, pool_size, stride=None, kind=MAX):
        self.pool_size = pool_size
        self.stride = stride if stride is not None else pool_size
        self.pool_kind = kind
        self._cache = None

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if self.pool_size > h or self.pool_size > w:
            raise StructuralError(f"pool window {self.pool_size} larger than {h}x{w} input")
        return (c, (h - self.pool_size) // self.stride + 1, (w - self.pool_size) // self.stride + 1)

    def forward(self, x, training=False, fmt=None):
        out, arg = pool_forward(x, self, return_argmax=True)
        if training:
            self._cache = (x.shape, arg)
        return out

    def backward(self, grad):
        shape, arg = self._cache
        return pool_backward(grad, shape, self, argmax=arg)


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, training=False, fmt=None):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Dense(Layer):
    kind = "fc"

    def __init__(self, in_features, out_features, weight=None, bias=None, rng=None, dtype=np.float32):
        self.in_features = in_features
        self.out_features = out_features
        if weight is None:
            rng = rng if rng is not None else np.random.default_rng()
            weight = glorot_uniform(rng, (out_features, in_features), in_features, out_features, dtype)
        if bias is None:
            bias = np.zeros(out_features, dtype=dtype)
        if weight.shape != (out_features, in_features) or bias.shape != (out_features,):
            raise StructuralError(
                f"fc weight {weight.shape} / bias {bias.shape} do not match ({out_features}, {in_features})"
            )
        self.weight = np.asarray(weight)
        self.bias = np.asarray(bias)
        self.grad_weight = None
        self.grad_bias = None

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def grads(self):
        return {"weight": self.grad_weight, "bias": self.grad_bias}

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise StructuralError(f"fc expects ({self.in_features},) input, got {tuple(in_shape)}")
        return (self.out_features,)

    def forward(self, x, training=False, fmt=None):
        if training:
            self._x = x
        return fc_forward(x, self, None if training else fmt)

    def backward(self, grad):
        gx, self.grad_weight, self.grad_bias = fc_backward(grad, self._x, self)
        return gx


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, training=False, fmt=None):
        return softmax(x)


# --------------------------------------------------------------------------
# Functional operations
# --------------------------------------------------------------------------


def _as_batch(x):
    x = np.asarray(x)
    return (x[None], True) if x.ndim == 3 else (x, False)


def _pad(x, layer):
    if layer.padding != SAME:
        return x, (0, 0, 0, 0)
    t, b = same_padding(x.shape[2], layer.kernel_size, layer.stride)
    l, r = same_padding(x.shape[3], layer.kernel_size, layer.stride)
    if t == b == l == r == 0:
        return x, (0, 0, 0, 0)
    return np.pad(x, ((0, 0), (0, 0), (t, b), (l, r))), (t, b, l, r)


def conv_forward(x, layer, fmt: FxFormat | None = None, return_cache=False):
    """Convolve a [C,H,W] or [N,C,H,W] input; output keeps the input's rank."""
    x, single = _as_batch(x)
    if x.ndim != 4:
        raise StructuralError(f"conv input must be 3-D or 4-D, got shape {x.shape}")
    _, ho, wo = layer.output_shape(x.shape[1:])
    xp, _ = _pad(x, layer)
    k, s = layer.kernel_size, layer.stride
    cols = kernels.im2col(np.ascontiguousarray(xp), k, s, ho, wo)
    w2 = layer.weight.reshape(layer.out_channels, -1)
    n = x.shape[0]
    if fmt is None:
        out = np.matmul(w2, cols)
    else:
        a = quantize(cols.transpose(0, 2, 1).reshape(-1, cols.shape[1]), fmt)
        prod = kernels.fx_matmul(np.ascontiguousarray(a), quantize(w2, fmt), fmt.frac_bits, fmt.code_min, fmt.code_max)
        out = prod.reshape(n, ho * wo, -1).transpose(0, 2, 1).astype(x.dtype)
    out = (out + layer.bias[None, :, None]).reshape(n, layer.out_channels, ho, wo)
    if single:
        out = out[0]
    if return_cache:
        return out, (x, cols)
    return out


def conv_backward(grad_out, cached_input, layer, cols=None):
    """Return (grad_input, grad_weight, grad_bias) for a conv layer."""
    x, single = _as_batch(cached_input)
    g, _ = _as_batch(grad_out)
    n, f, ho, wo = g.shape
    if f != layer.out_channels or x.shape[1] != layer.in_channels:
        raise StructuralError("conv backward shapes do not match the layer")
    k, s = layer.kernel_size, layer.stride
    xp, (t, b, l, r) = _pad(x, layer)
    if cols is None:
        cols = kernels.im2col(np.ascontiguousarray(xp), k, s, ho, wo)
    g2 = np.ascontiguousarray(g.reshape(n, f, ho * wo))
    grad_w = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(layer.weight.shape)
    grad_b = g2.sum(axis=(0, 2))
    dcols = np.matmul(layer.weight.reshape(f, -1).T, g2)
    dxp = kernels.col2im(np.ascontiguousarray(dcols), x.shape[1], xp.shape[2], xp.shape[3], k, s, ho, wo)
    gx = dxp[:, :, t : dxp.shape[2] - b, l : dxp.shape[3] - r]
    if single:
        gx = gx[0]
    return gx, grad_w.astype(layer.weight.dtype), grad_b.astype(layer.bias.dtype)


def pool_forward(x, layer, return_argmax=False):
    x, single = _as_batch(x)
    layer.output_shape(x.shape[1:])
    p, s = layer.pool_size, layer.stride
    x = np.ascontiguousarray(x)
    if layer.pool_kind == MAX:
        out, arg = kernels.maxpool_forward(x, p, s)
    else:
        ho = (x.shape[2] - p) // s + 1
        wo = (x.shape[3] - p) // s + 1
        out = np.zeros((x.shape[0], x.shape[1], ho, wo), dtype=x.dtype)
        for ki in range(p):
            for kj in range(p):
                out += x[:, :, ki : ki + s * (ho - 1) + 1 : s, kj : kj + s * (wo - 1) + 1 : s]
        out /= p * p
        arg = None
    if single:
        out = out[0]
        arg = None if arg is None else arg[0]
    return (out, arg) if return_argmax else out


def pool_backward(grad_out, input_shape, layer, argmax=None, cached_input=None):
    """Max pooling routes each gradient to its window's argmax; average spreads it evenly.

    For max pooling either ``argmax`` (from the forward pass) or
    ``cached_input`` must be supplied.
    """
    g, single = _as_batch(grad_out)
    shape = tuple(input_shape) if len(input_shape) == 4 else (1, *input_shape)
    h, w = shape[2], shape[3]
    p, s = layer.pool_size, layer.stride
    g = np.ascontiguousarray(g)
    if layer.pool_kind == MAX:
        if argmax is None:
            _, argmax = pool_forward(np.asarray(cached_input).reshape(shape), layer, return_argmax=True)
        arg = argmax[None] if argmax.ndim == 3 else argmax
        gx = kernels.maxpool_backward(g, np.ascontiguousarray(arg, dtype=np.int32), h, w, p, s)
    else:
        ho, wo = g.shape[2], g.shape[3]
        gx = np.zeros(shape, dtype=g.dtype)
        share = g / (p * p)
        for ki in range(p):
            for kj in range(p):
                gx[:, :, ki : ki + s * (ho - 1) + 1 : s, kj : kj + s * (wo - 1) + 1 : s] += share
    return gx[0] if single else gx


def batchnorm_forward(x, state, training):
    """Per-channel normalization over (N, H, W); returns (out, cache)."""
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    shape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
    if training:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        m = x.size // x.shape[1]
        unbiased = var * (m / (m - 1)) if m > 1 else var
        mom = state.momentum
        state.running_mean = (mom * state.running_mean + (1 - mom) * mean).astype(state.running_mean.dtype)
        state.running_var = (mom * state.running_var + (1 - mom) * unbiased).astype(state.running_var.dtype)
    else:
        mean, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = state.gamma.reshape(shape) * xhat + state.beta.reshape(shape)
    return out.astype(x.dtype, copy=False), (xhat, inv_std)


def batchnorm_backward(grad_out, cache, state):
    """Backward of a training-mode batchnorm; returns (grad_input, grad_gamma, grad_beta)."""
    xhat, inv_std = cache
    axes = (0, 2, 3) if grad_out.ndim == 4 else (0,)
    shape = (1, -1, 1, 1) if grad_out.ndim == 4 else (1, -1)
    m = grad_out.size // grad_out.shape[1]
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    dxhat = grad_out * state.gamma.reshape(shape)
    gx = (inv_std.reshape(shape) / m) * (
        m * dxhat - dxhat.sum(axis=axes).reshape(shape) - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape)
    )
    return gx.astype(grad_out.dtype, copy=False), grad_gamma, grad_beta


def fc_forward(x, layer, fmt: FxFormat | None = None):
    x = np.asarray(x)
    single = x.ndim == 1
    x2 = x[None] if single else x
    if x2.shape[1] != layer.in_features:
        raise StructuralError(f"fc expects {layer.in_features} inputs, got {x2.shape[1]}")
    if fmt is None:
        out = x2 @ layer.weight.T + layer.bias
    else:
        prod = kernels.fx_matmul(quantize(x2, fmt), quantize(layer.weight, fmt), fmt.frac_bits, fmt.code_min, fmt.code_max)
        out = (prod + layer.bias).astype(x2.dtype)
    return out[0] if single else out


def fc_backward(grad_out, cached_input, layer):
    g = np.asarray(grad_out)
    x = np.asarray(cached_input)
    single = g.ndim == 1
    g2, x2 = (g[None], x[None]) if single else (g, x)
    grad_w = g2.T @ x2
    grad_b = g2.sum(axis=0)
    gx = g2 @ layer.weight
    return (gx[0] if single else gx), grad_w, grad_b


def relu(x):
    return np.maximum(x, 0)


def softmax(z):
    z = np.asarray(z)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(pred, label):
    """Mean negative log-likelihood of integer labels under probabilities ``pred``."""
    pred = np.asarray(pred)
    if pred.ndim == 1:
        return float(-np.log(pred[int(label)] + LOG_EPS))
    label = np.asarray(label)
    return float(-np.mean(np.log(pred[np.arange(len(label)), label] + LOG_EPS)))


def softmax_cross_entropy_grad(probs, labels):
    """Gradient of the mean cross-entropy w.r.t. the logits."""
    g = probs.copy()
    g[np.arange(len(labels)), labels] -= 1
    return g / len(labels)


# --------------------------------------------------------------------------
# Network and training
# --------------------------------------------------------------------------


@dataclass
class SGDConfig:
    learning_rate: float = 0.1
    batch_size: int = 32
    epochs_per_training: int = 1

    def __post_init__(self):
        if not (0 <= self.learning_rate <= 1.0):
            raise ValueError(f"learning rate {self.learning_rate} outside [0, 1]")
        if self.batch_size < 1 or self.epochs_per_training < 0:
            raise ValueError("batch_size must be >= 1 and epochs_per_training >= 0")


class Network:
    """Ordered chain of layers ending in a softmax."""

    def __init__(self, layers, input_shape, num_classes=10, numeric_mode: FxFormat | None = None):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.numeric_mode = numeric_mode
        self.loss_history = []
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        if shape != (num_classes,):
            raise StructuralError(f"network output shape {shape} != ({num_classes},)")

    def layer_shapes(self):
        shapes, shape = [], self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
            shapes.append(shape)
        return shapes

    @property
    def dtype(self):
        for layer in self.layers:
            for p in layer.params().values():
                return p.dtype
        return np.dtype(np.float32)

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        return self

    def num_params(self):
        return sum(layer.num_params() for layer in self.layers)

    def logits(self, x, training=False, fmt=None):
        for layer in self.layers:
            if isinstance(layer, Softmax):
                break
            x = layer.forward(x, training=training, fmt=fmt)
        return x

    def forward(self, x, training=False, fmt="default"):
        if isinstance(fmt, str):
            fmt = self.numeric_mode if fmt == "default" else parse_mode(fmt)
        return softmax(self.logits(x, training=training, fmt=fmt))

    def backward(self, grad_logits):
        g = grad_logits
        body = self.layers[:-1] if isinstance(self.layers[-1], Softmax) else self.layers
        for layer in reversed(body):
            g = layer.backward(g)
        return g

    def sgd_step(self, lr):
        for layer in self.layers:
            grads = layer.grads()
            for name, p in layer.params().items():
                p -= (lr * grads[name]).astype(p.dtype, copy=False)

    def predict(self, x, fmt="default", batch_size=500):
        out = []
        for i in range(0, len(x), batch_size):
            out.append(np.argmax(self.forward(x[i : i + batch_size], fmt=fmt), axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def _images_labels(data):
    if hasattr(data, "images"):
        return data.images, data.labels
    return data


def train_epochs(net: Network, data, cfg: SGDConfig, rng_seed) -> Network:
    """Minibatch SGD in floating point; each epoch visits a fresh permutation.

    Raises :class:`TrainingDiverged` on a non-finite loss.
    """
    images, labels = _images_labels(data)
    if len(images) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(rng_seed)
    dtype = net.dtype
    for _ in range(cfg.epochs_per_training):
        order = rng.permutation(len(images))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = images[idx].astype(dtype, copy=False)
            yb = labels[idx]
            probs = softmax(net.logits(xb, training=True))
            loss = cross_entropy(probs, yb)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at sample offset {start}")
            net.backward(softmax_cross_entropy_grad(probs, yb))
            if cfg.learning_rate != 0:
                net.sgd_step(cfg.learning_rate)
            total += loss * len(idx)
            count += len(idx)
        net.loss_history.append(total / count)
    return net


def evaluate_accuracy(net: Network, data, mode="default", batch_size=500) -> float:
    """Fraction of samples whose argmax prediction equals the label."""
    images, labels = _images_labels(data)
    if len(labels) == 0:
        return 0.0
    pred = net.predict(images, fmt=mode, batch_size=batch_size)
    return float(np.mean(pred == np.asarray(labels)))
