"""Layers with explicit forward/backward passes.

Each layer caches what its backward pass needs during ``forward`` and stores
parameter gradients in ``self.grads`` on ``backward``.  There is no graph
engine; the network wires layers by hand.
"""

import numpy as np

from . import kernels

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, g):
    # subgradient at exactly 0 is 0
    return g * (x > 0)


def softmax(logits, axis=1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits, targets):
    """Mean voxel-wise cross-entropy of ``(N, C, D, H, W)`` logits against class ids.

    Returns ``(loss, grad_logits)``.
    """
    targets = np.asarray(targets)
    if logits.shape[:1] + logits.shape[2:] != targets.shape:
        raise ValueError(f"logits {logits.shape} and targets {targets.shape} do not match")
    C = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= C):
        raise ValueError(f"targets must lie in [0, {C})")
    onehot = targets[:, None] == np.arange(C).reshape(1, C, 1, 1, 1)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    total = e.sum(axis=1, keepdims=True)
    nvox = targets.size
    loss = (np.log(total).sum() - z[onehot].sum()) / nvox
    grad = e / total
    grad -= onehot
    grad /= nvox
    return float(loss), grad.astype(logits.dtype, copy=False)


def _channel_view(x):
    return x.reshape(x.shape[0], x.shape[1], -1)


def batchnorm_forward(x, gamma, beta, mean=None, var=None):
    """Per-channel normalization; batch statistics are used when ``mean``/``var`` are omitted."""
    if mean is None:
        v = _channel_view(x)
        m = v.shape[0] * v.shape[2]
        mean = v.sum(axis=(0, 2), dtype=np.float64) / m
        var = np.maximum((v.astype(np.float64) ** 2).sum(axis=(0, 2)) / m - mean ** 2, 0.0)
        mean = mean.astype(x.dtype)
        var = var.astype(x.dtype)
    shp = (1, -1, 1, 1, 1)
    inv = (1.0 / np.sqrt(var + BN_EPS)).astype(x.dtype)
    xhat = (x - mean.reshape(shp)) * inv.reshape(shp)
    y = gamma.reshape(shp) * xhat + beta.reshape(shp)
    return y.astype(x.dtype, copy=False), (xhat, inv, mean, var)


def batchnorm_backward(g, gamma, cache):
    xhat, inv, _, _ = cache
    shp = (1, -1, 1, 1, 1)
    gv = _channel_view(g)
    gbeta = gv.sum(axis=(0, 2))
    ggamma = (gv * _channel_view(xhat)).sum(axis=(0, 2))
    m = g.size // g.shape[1]
    gx = (gamma * inv).reshape(shp) * (g - gbeta.reshape(shp) / m - xhat * (ggamma / m).reshape(shp))
    return gx.astype(g.dtype, copy=False), ggamma, gbeta


class Layer:
    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}


class Conv3x3(Layer):
    def __init__(self, cin, cout, rng, dtype):
        super().__init__()
        std = np.sqrt(2.0 / (cin * 27))
        self.params["weight"] = (rng.standard_normal((cout, cin, 3, 3, 3)) * std).astype(dtype)

    def forward(self, x, train):
        self._x = x
        return kernels.conv3x3(x, self.params["weight"])

    def backward(self, g):
        gx, gw = kernels.conv3x3_backward(self._x, self.params["weight"], g)
        self.grads["weight"] = gw
        return gx


class Deconv4x4(Layer):
    def __init__(self, cin, cout, rng, dtype):
        super().__init__()
        # each output voxel receives 8 of the 64 taps per input channel
        std = np.sqrt(2.0 / (cin * 8))
        self.params["weight"] = (rng.standard_normal((cin, cout, 4, 4, 4)) * std).astype(dtype)

    def forward(self, x, train):
        self._x = x
        return kernels.deconv4x4(x, self.params["weight"])

    def backward(self, g):
        gx, gw = kernels.deconv4x4_backward(self._x, self.params["weight"], g)
        self.grads["weight"] = gw
        return gx


class Conv1x1(Layer):
    """Pointwise classifier head with bias."""

    def __init__(self, cin, cout, rng, dtype, gain=1.0):
        super().__init__()
        self.params["weight"] = (rng.standard_normal((cout, cin)) * gain / np.sqrt(cin)).astype(dtype)
        self.params["bias"] = np.zeros(cout, dtype)

    def forward(self, x, train):
        self._x = x
        y = np.einsum("oc,ncdhw->nodhw", self.params["weight"], x, optimize=True)
        return y + self.params["bias"].reshape(1, -1, 1, 1, 1)

    def backward(self, g):
        x = self._x
        self.grads["weight"] = np.einsum("nodhw,ncdhw->oc", g, x, optimize=True)
        self.grads["bias"] = g.sum(axis=(0, 2, 3, 4))
        return np.einsum("oc,nodhw->ncdhw", self.params["weight"], g, optimize=True)


class BatchNorm3d(Layer):
    def __init__(self, channels, dtype):
        super().__init__()
        self.params["gamma"] = np.ones(channels, dtype)
        self.params["beta"] = np.zeros(channels, dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype)
        self.buffers["running_var"] = np.ones(channels, dtype)
        self.buffers["tracked"] = np.zeros(1, dtype)

    def forward(self, x, train):
        p, b = self.params, self.buffers
        if train:
            y, self._cache = batchnorm_forward(x, p["gamma"], p["beta"])
            _, _, mean, var = self._cache
            m = x.size // x.shape[1]
            unbiased = var * (m / max(m - 1, 1))
            b["running_mean"][:] = BN_MOMENTUM * b["running_mean"] + (1 - BN_MOMENTUM) * mean
            b["running_var"][:] = BN_MOMENTUM * b["running_var"] + (1 - BN_MOMENTUM) * unbiased
            b["tracked"][0] += 1
            return y
        if b["tracked"][0] == 0:
            raise RuntimeError("batch norm in eval mode before any running statistics were collected")
        y, _ = batchnorm_forward(x, p["gamma"], p["beta"], b["running_mean"], b["running_var"])
        return y

    def backward(self, g):
        gx, ggamma, gbeta = batchnorm_backward(g, self.params["gamma"], self._cache)
        self.grads["gamma"] = ggamma.astype(g.dtype)
        self.grads["beta"] = gbeta.astype(g.dtype)
        return gx


class MaxPool(Layer):
    def forward(self, x, train):
        y, self._idx = kernels.maxpool2(x)
        return y

    def backward(self, g):
        return kernels.maxpool2_backward(g, self._idx)


class ReLU(Layer):
    def forward(self, x, train):
        self._x = x
        return relu(x)

    def backward(self, g):
        return relu_backward(self._x, g)


class Sequential(Layer):
    """Chain of named layers; parameters are exposed as ``"<child>.<param>"``."""

    def __init__(self, *named):
        super().__init__()
        self.children = list(named)

    def forward(self, x, train):
        for _, layer in self.children:
            x = layer.forward(x, train)
        return x

    def backward(self, g):
        for _, layer in reversed(self.children):
            g = layer.backward(g)
        return g

    def named_layers(self, prefix=""):
        for name, layer in self.children:
            full = f"{prefix}{name}"
            if isinstance(layer, Sequential):
                yield from layer.named_layers(full + ".")
            else:
                yield full, layer


def conv_bn_relu(cin, cout, rng, dtype):
    return Sequential(("conv", Conv3x3(cin, cout, rng, dtype)), ("bn", BatchNorm3d(cout, dtype)), ("relu", ReLU()))


def deconv_bn_relu(cin, cout, rng, dtype):
    return Sequential(("deconv", Deconv4x4(cin, cout, rng, dtype)), ("bn", BatchNorm3d(cout, dtype)), ("relu", ReLU()))
