"""Stateful layers built on :mod:`ops`.

A layer owns its parameters (``params``), their gradients (``grads``,
filled by ``backward``) and non-trainable state (``buffers``).  Composite
layers list their sub-layers in ``children``; names are dotted paths
assigned by :func:`named_layers`.
"""

import numpy as np

from . import ops


class Layer:
    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}
        self.children = {}

    def forward(self, x, train):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError


def named_layers(layer, prefix=""):
    yield prefix, layer
    for name, child in layer.children.items():
        yield from named_layers(child, f"{prefix}.{name}" if prefix else name)


def he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Layer):
    """3x3 (or 1x1) convolution.  ``bias=False`` for convs whose output
    only ever reaches a batch norm, which would cancel the bias."""

    def __init__(self, rng, c_in, c_out, kernel=3, stride=1, pad=0, dtype=np.float32, bias=True):
        super().__init__()
        self.stride, self.pad = stride, pad
        self.params["w"] = he_normal(rng, (kernel, kernel, c_in, c_out), kernel * kernel * c_in, dtype)
        if bias:
            self.params["b"] = np.zeros(c_out, dtype=dtype)

    def forward(self, x, train):
        out, self._cache = ops.conv2d_forward(x, self.params["w"], self.params.get("b"), self.stride, self.pad)
        return out

    def backward(self, dout):
        dx, self.grads["w"], db = ops.conv2d_backward(dout, self._cache)
        if db is not None:
            self.grads["b"] = db
        return dx


class BatchNorm(Layer):
    def __init__(self, channels, dtype=np.float32, momentum=0.9, eps=1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def forward(self, x, train):
        out, self._cache = ops.batchnorm_forward(
            x, self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"],
            train, self.momentum, self.eps,
        )
        return out

    def backward(self, dout):
        dx, self.grads["gamma"], self.grads["beta"] = ops.batchnorm_backward(dout, self._cache)
        return dx


class ReLU(Layer):
    def forward(self, x, train):
        out, self._mask = ops.relu_forward(x)
        return out

    def backward(self, dout):
        return ops.relu_backward(dout, self._mask)


class AvgPool2(Layer):
    def forward(self, x, train):
        out, self._cache = ops.avg_pool2_forward(x)
        return out

    def backward(self, dout):
        return ops.avg_pool2_backward(dout, self._cache)


class MaxPool2(Layer):
    def forward(self, x, train):
        out, self._cache = ops.max_pool2_forward(x)
        return out

    def backward(self, dout):
        return ops.max_pool2_backward(dout, self._cache)


class Linear(Layer):
    def __init__(self, rng, f_in, f_out, dtype=np.float32):
        super().__init__()
        self.params["w"] = he_normal(rng, (f_in, f_out), f_in, dtype)
        self.params["b"] = np.zeros(f_out, dtype=dtype)

    def forward(self, x, train):
        out, self._cache = ops.fc_forward(x, self.params["w"], self.params["b"])
        return out

    def backward(self, dout):
        dx, self.grads["w"], self.grads["b"] = ops.fc_backward(dout, self._cache)
        return dx


class Sequential(Layer):
    def __init__(self, *layers):
        super().__init__()
        for i, layer in enumerate(layers):
            self.children[str(i)] = layer

    def forward(self, x, train):
        for layer in self.children.values():
            x = layer.forward(x, train)
        return x

    def backward(self, dout):
        for layer in reversed(list(self.children.values())):
            dout = layer.backward(dout)
        return dout


def bn_relu_conv(rng, c_in, c_out, kernel, pad, dtype):
    return Sequential(BatchNorm(c_in, dtype), ReLU(), Conv2d(rng, c_in, c_out, kernel, 1, pad, dtype, bias=False))


class DenseBlock(Layer):
    """``n_layers`` BN-ReLU-conv3x3 layers, each fed the concatenation of
    the block input and all earlier layer outputs.

    Output channels: ``c_in + n_layers * growth``.
    """

    def __init__(self, rng, c_in, n_layers, growth, dtype=np.float32):
        super().__init__()
        self.c_in, self.n_layers, self.growth = c_in, n_layers, growth
        for i in range(n_layers):
            self.children[str(i)] = bn_relu_conv(rng, c_in + i * growth, growth, 3, 1, dtype)

    @property
    def c_out(self):
        return self.c_in + self.n_layers * self.growth

    def forward(self, x, train):
        n, h, w, _ = x.shape
        buf = np.empty((n, h, w, self.c_out), dtype=x.dtype)
        buf[..., : self.c_in] = x
        c = self.c_in
        for layer in self.children.values():
            buf[..., c : c + self.growth] = layer.forward(buf[..., :c], train)
            c += self.growth
        return buf

    def backward(self, dout):
        dbuf = dout.copy()
        c = self.c_out
        for layer in reversed(list(self.children.values())):
            c -= self.growth
            dbuf[..., :c] += layer.backward(dbuf[..., c : c + self.growth])
        return dbuf[..., : self.c_in]


class Bottleneck(Layer):
    """Pre-activation residual unit: ``y = x + f(x)`` with
    ``f`` = 1x1 reduce, 3x3, 1x1 expand (each preceded by BN-ReLU)."""

    def __init__(self, rng, channels, reduction=4, dtype=np.float32):
        super().__init__()
        mid = max(1, channels // reduction)
        self.children["f"] = Sequential(
            bn_relu_conv(rng, channels, mid, 1, 0, dtype),
            bn_relu_conv(rng, mid, mid, 3, 1, dtype),
            bn_relu_conv(rng, mid, channels, 1, 0, dtype),
        )

    def forward(self, x, train):
        return x + self.children["f"].forward(x, train)

    def backward(self, dout):
        return dout + self.children["f"].backward(dout)
