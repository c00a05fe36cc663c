"""Small dense-tensor layers with hand-written backward passes.

Tensors are NCHW numpy arrays.  Each layer caches what its backward pass
needs during ``forward`` and accumulates parameter gradients into
``layer.grads``; the arithmetic dtype follows the input (float32 for
training, float64 for gradient checks).
"""
from __future__ import annotations

import numpy as np


def conv_out_size(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def _im2col(x, k, s, p, oh, ow):
    """Patches laid out as (C, k, k, N, oh, ow)."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = np.empty((c, k, k, n, oh, ow), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i:i + s * oh:s, j:j + s * ow:s]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols


def _col2im(cols, shape, k, s, p):
    n, c, h, w = shape
    oh, ow = cols.shape[-2:]
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + s * oh:s, j:j + s * ow:s] += cols[:, i, j].transpose(1, 0, 2, 3)
    return xp[:, :, p:p + h, p:p + w] if p else xp


def conv2d_forward(x, weight, bias, stride=1, padding=0):
    n, c, h, w = x.shape
    o, cw, k, k2 = weight.shape
    if cw != c or k != k2:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, weight {weight.shape}")
    oh, ow = conv_out_size(h, k, stride, padding), conv_out_size(w, k, stride, padding)
    if oh < 1 or ow < 1:
        raise ValueError("conv2d: kernel larger than padded input")
    cols = _im2col(x, k, stride, padding, oh, ow).reshape(c * k * k, n * oh * ow)
    out = weight.reshape(o, -1) @ cols
    out = out.reshape(o, n, oh, ow).transpose(1, 0, 2, 3) + bias.reshape(1, o, 1, 1)
    return np.ascontiguousarray(out), (x.shape, cols, weight, stride, padding)


def conv2d_backward(dy, cache):
    x_shape, cols, weight, stride, padding = cache
    o, c, k, _ = weight.shape
    n, _, oh, ow = dy.shape
    dy2 = dy.transpose(1, 0, 2, 3).reshape(o, -1)
    dw = (dy2 @ cols.T).reshape(weight.shape)
    db = dy.sum(axis=(0, 2, 3))
    dcols = (weight.reshape(o, -1).T @ dy2).reshape(c, k, k, n, oh, ow)
    dx = _col2im(dcols, x_shape, k, stride, padding)
    return dx, dw, db


def conv_transpose2d_forward(x, weight, bias, stride=1, padding=0):
    """Weight layout (in_channels, out_channels, k, k)."""
    n, c, h, w = x.shape
    ci, co, k, k2 = weight.shape
    if ci != c or k != k2:
        raise ValueError(f"conv_transpose2d shape mismatch: input {x.shape}, weight {weight.shape}")
    oh = (h - 1) * stride - 2 * padding + k
    ow = (w - 1) * stride - 2 * padding + k
    x2 = x.transpose(1, 0, 2, 3).reshape(c, -1)
    cols = (weight.reshape(c, -1).T @ x2).reshape(co, k, k, n, h, w)
    out = _col2im(cols, (n, co, oh, ow), k, stride, padding) + bias.reshape(1, co, 1, 1)
    return out, (x2, x.shape, weight, stride, padding)


def conv_transpose2d_backward(dy, cache):
    x2, x_shape, weight, stride, padding = cache
    n, c, h, w = x_shape
    _, co, k, _ = weight.shape
    dcols = _im2col(dy, k, stride, padding, h, w).reshape(co * k * k, -1)
    dx = (weight.reshape(c, -1) @ dcols).reshape(c, n, h, w).transpose(1, 0, 2, 3)
    dw = (x2 @ dcols.T).reshape(weight.shape)
    db = dy.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(dx), dw, db


class Layer:
    params: dict
    grads: dict
    # parameter names that receive weight decay
    decay: tuple = ()

    def zero_grad(self):
        for name, p in self.params.items():
            self.grads[name] = np.zeros_like(p)

    def astype(self, dtype):
        for name in self.params:
            self.params[name] = self.params[name].astype(dtype)
        self.zero_grad()
        return self


def _kaiming_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Layer):
    decay = ("weight",)

    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng()
        self.stride, self.padding = stride, padding
        self.params = {
            "weight": _kaiming_uniform(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel, dtype),
            "bias": np.zeros(out_ch, dtype=dtype),
        }
        self.grads = {}
        self.zero_grad()

    def forward(self, x, train=True):
        y, self._cache = conv2d_forward(x, self.params["weight"], self.params["bias"], self.stride, self.padding)
        return y

    def backward(self, dy):
        dx, dw, db = conv2d_backward(dy, self._cache)
        self.grads["weight"] += dw
        self.grads["bias"] += db
        return dx


class ConvTranspose2d(Layer):
    decay = ("weight",)

    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng()
        self.stride, self.padding = stride, padding
        # each output pixel sees in_ch * (kernel/stride)^2 inputs
        fan_in = in_ch * kernel * kernel / stride**2
        self.params = {
            "weight": _kaiming_uniform(rng, (in_ch, out_ch, kernel, kernel), fan_in, dtype),
            "bias": np.zeros(out_ch, dtype=dtype),
        }
        self.grads = {}
        self.zero_grad()

    def forward(self, x, train=True):
        y, self._cache = conv_transpose2d_forward(
            x, self.params["weight"], self.params["bias"], self.stride, self.padding
        )
        return y

    def backward(self, dy):
        dx, dw, db = conv_transpose2d_backward(dy, self._cache)
        self.grads["weight"] += dw
        self.grads["bias"] += db
        return dx


class BatchNorm2d(Layer):
    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.momentum, self.eps = momentum, eps
        self.params = {"gamma": np.ones(channels, dtype=dtype), "beta": np.zeros(channels, dtype=dtype)}
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.track_stats = True
        self.grads = {}
        self.zero_grad()

    def astype(self, dtype):
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)
        return super().astype(dtype)

    def forward(self, x, train=True):
        g = self.params["gamma"].reshape(1, -1, 1, 1)
        b = self.params["beta"].reshape(1, -1, 1, 1)
        if train:
            if x.shape[0] < 2:
                raise ValueError("batchnorm in train mode needs a batch of at least 2")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            if self.track_stats:
                m = x.shape[0] * x.shape[2] * x.shape[3]
                self.running_mean = ((1 - self.momentum) * self.running_mean + self.momentum * mean).astype(x.dtype)
                self.running_var = (
                    (1 - self.momentum) * self.running_var + self.momentum * var * m / (m - 1)
                ).astype(x.dtype)
        else:
            mean, var = self.running_mean, self.running_var
        invstd = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(1, -1, 1, 1)) * invstd.reshape(1, -1, 1, 1)
        self._cache = (xhat, invstd, train)
        return (g * xhat + b).astype(x.dtype, copy=False)

    def backward(self, dy):
        xhat, invstd, train = self._cache
        self.grads["gamma"] += (dy * xhat).sum(axis=(0, 2, 3))
        self.grads["beta"] += dy.sum(axis=(0, 2, 3))
        dxhat = dy * self.params["gamma"].reshape(1, -1, 1, 1)
        inv = invstd.reshape(1, -1, 1, 1)
        if not train:
            return dxhat * inv
        m = dy.shape[0] * dy.shape[2] * dy.shape[3]
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        return (inv / m) * (m * dxhat - s1 - xhat * s2)


class ReLU(Layer):
    def __init__(self):
        self.params, self.grads = {}, {}

    def forward(self, x, train=True):
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, dy):
        return dy * self._mask


class Tanh(Layer):
    def __init__(self):
        self.params, self.grads = {}, {}

    def forward(self, x, train=True):
        self._y = np.tanh(x)
        return self._y

    def backward(self, dy):
        return dy * (1 - self._y**2)


def relu(x):
    return np.maximum(x, 0)


def sgd_step(param, grad, lr, weight_decay=0.0):
    """In-place w <- w - lr * (g + weight_decay * w)."""
    if param.shape != grad.shape:
        raise ValueError("parameter and gradient shapes differ")
    param -= (lr * (grad + weight_decay * param)).astype(param.dtype, copy=False)
    return param


class SGD:
    """Plain SGD with optional momentum; decay only on layer.decay params."""

    def __init__(self, layers, lr=1e-3, weight_decay=1e-5, momentum=0.0):
        self.layers = list(layers)
        self.lr, self.weight_decay, self.momentum = lr, weight_decay, momentum
        self._velocity = {}

    def step(self, extra=()):
        """``extra`` holds (param, grad) pairs exempt from decay, e.g. a codebook."""
        pairs = []
        for li, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                wd = self.weight_decay if name in layer.decay else 0.0
                pairs.append(((li, name), p, layer.grads[name], wd))
        for i, (p, g) in enumerate(extra):
            pairs.append((("extra", i), p, g, 0.0))
        for key, p, g, wd in pairs:
            if self.momentum:
                d = g + wd * p
                v = self._velocity.get(key)
                v = d if v is None else self.momentum * v + d
                self._velocity[key] = v
                p -= (self.lr * v).astype(p.dtype, copy=False)
            else:
                sgd_step(p, g, self.lr, wd)


class Adam(SGD):
    """Adam with coupled L2 decay on the same parameters SGD would decay."""

    def __init__(self, layers, lr=1e-3, weight_decay=1e-5, betas=(0.9, 0.999), eps=1e-8):
        super().__init__(layers, lr, weight_decay)
        self.betas, self.eps = betas, eps
        self._m, self._v, self._t = {}, {}, 0

    def step(self, extra=()):
        self._t += 1
        b1, b2 = self.betas
        pairs = []
        for li, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                wd = self.weight_decay if name in layer.decay else 0.0
                pairs.append(((li, name), p, layer.grads[name], wd))
        for i, (p, g) in enumerate(extra):
            pairs.append((("extra", i), p, g, 0.0))
        for key, p, g, wd in pairs:
            d = g + wd * p
            m = self._m[key] = b1 * self._m.get(key, 0.0) + (1 - b1) * d
            v = self._v[key] = b2 * self._v.get(key, 0.0) + (1 - b2) * d * d
            mhat = m / (1 - b1 ** self._t)
            vhat = v / (1 - b2 ** self._t)
            p -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype, copy=False)
