"""Stateful layers built on :mod:`functional`.

A layer caches what its backward pass needs during ``forward`` and accumulates
parameter gradients into ``Parameter.grad`` during ``backward``. Each layer is
called at most once per training step; the twin model concatenates the two
origins before shared layers to respect that.
"""

import numpy as np

from . import functional as F
from .init import orthogonal_

LEAKY_SLOPE = 0.2


class Parameter:
    __slots__ = ("_data", "grad", "name", "group", "frozen")

    def __init__(self, data, name="", group=""):
        self.data = data
        self.grad = None
        self.name = name
        self.group = group
        self.frozen = False

    @property
    def data(self):
        return self._data

    @data.setter
    def data(self, value):
        # the fused optimizer kernel updates flat views in place
        self._data = np.ascontiguousarray(value)

    @property
    def shape(self):
        return self.data.shape

    def accumulate(self, g):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Parameter({self.name!r}, group={self.group!r}, shape={self.data.shape})"


class Module:
    def __init__(self):
        self._cache = None

    def children(self):
        return []

    def own_parameters(self):
        return []

    def own_buffers(self):
        return []

    def parameters(self):
        out = list(self.own_parameters())
        for child in self.children():
            out.extend(child.parameters())
        return out

    def buffers(self):
        """Non-trainable state (batch-norm running statistics) as (name, array) pairs."""
        out = list(self.own_buffers())
        for child in self.children():
            out.extend(child.buffers())
        return out

    def name_parameters(self, prefix, group):
        for p in self.own_parameters():
            p.name = f"{prefix}.{p.name.rsplit('.', 1)[-1]}"
            p.group = group
        for i, child in enumerate(self.children()):
            child.name_parameters(f"{prefix}.{i}", group)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def clear_cache(self):
        self._cache = None
        for child in self.children():
            child.clear_cache()

    def to_dtype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def __call__(self, x, train=False, rng=None):
        return self.forward(x, train=train, rng=rng)


class Conv2d(Module):
    def __init__(self, cin, cout, k, stride=1, padding=0):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.input_grad = True
        self.weight = Parameter(np.zeros((cout, cin, k, k), np.float32), "weight")
        self.bias = Parameter(np.zeros(cout, np.float32), "bias")

    def own_parameters(self):
        return [self.weight, self.bias]

    def reset_parameters(self, rng, gain=1.0):
        self.weight.data = orthogonal_(self.weight.shape, gain, rng)
        self.bias.data = np.zeros_like(self.bias.data)

    def forward(self, x, train=False, rng=None):
        out, self._cache = F.conv2d(x, self.weight.data, self.bias.data, self.stride, self.padding)
        return out

    def backward(self, dout):
        dx, dw, db = F.conv2d_backward(dout, self._cache, input_grad=self.input_grad)
        self.weight.accumulate(dw)
        self.bias.accumulate(db)
        self._cache = None
        return dx


class ConvTranspose2d(Module):
    def __init__(self, cin, cout, k, stride=1, padding=0, output_padding=0):
        super().__init__()
        self.stride, self.padding, self.output_padding = stride, padding, output_padding
        self.weight = Parameter(np.zeros((cin, cout, k, k), np.float32), "weight")
        self.bias = Parameter(np.zeros(cout, np.float32), "bias")

    def own_parameters(self):
        return [self.weight, self.bias]

    def reset_parameters(self, rng, gain=1.0):
        self.weight.data = orthogonal_(self.weight.shape, gain, rng)
        self.bias.data = np.zeros_like(self.bias.data)

    def forward(self, x, train=False, rng=None):
        out, self._cache = F.conv_transpose2d(
            x, self.weight.data, self.bias.data, self.stride, self.padding, self.output_padding
        )
        return out

    def backward(self, dout):
        dx, dw, db = F.conv_transpose2d_backward(dout, self._cache)
        self.weight.accumulate(dw)
        self.bias.accumulate(db)
        self._cache = None
        return dx


class Linear(Module):
    def __init__(self, fin, fout):
        super().__init__()
        self.weight = Parameter(np.zeros((fout, fin), np.float32), "weight")
        self.bias = Parameter(np.zeros(fout, np.float32), "bias")

    def own_parameters(self):
        return [self.weight, self.bias]

    def reset_parameters(self, rng, gain=1.0):
        self.weight.data = orthogonal_(self.weight.shape, gain, rng)
        self.bias.data = np.zeros_like(self.bias.data)

    def forward(self, x, train=False, rng=None):
        out, self._cache = F.linear(x, self.weight.data, self.bias.data)
        return out

    def backward(self, dout):
        dx, dw, db = F.linear_backward(dout, self._cache)
        self.weight.accumulate(dw)
        self.bias.accumulate(db)
        self._cache = None
        return dx


class LeakyReLU(Module):
    def __init__(self, slope=LEAKY_SLOPE):
        super().__init__()
        self.slope = slope

    def forward(self, x, train=False, rng=None):
        out, self._cache = F.leaky_relu(x, self.slope)
        return out

    def backward(self, dout):
        dx = F.leaky_relu_backward(dout, self._cache)
        self._cache = None
        return dx


class Sigmoid(Module):
    def forward(self, x, train=False, rng=None):
        out, self._cache = F.sigmoid(x)
        return out

    def backward(self, dout):
        dx = F.sigmoid_backward(dout, self._cache)
        self._cache = None
        return dx


class Dropout(Module):
    def __init__(self, rate):
        super().__init__()
        self.rate = rate

    def forward(self, x, train=False, rng=None):
        out, self._cache = F.dropout(x, self.rate, rng, train)
        return out

    def backward(self, dout):
        dx = F.dropout_backward(dout, self._cache)
        self._cache = None
        return dx


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=F.BN_EPS):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = Parameter(np.ones(channels, np.float32), "gamma")
        self.beta = Parameter(np.zeros(channels, np.float32), "beta")
        self.running_mean = np.zeros(channels, np.float32)
        self.running_var = np.ones(channels, np.float32)

    def own_parameters(self):
        return [self.gamma, self.beta]

    def own_buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def forward(self, x, train=False, rng=None):
        out, self._cache = F.batchnorm2d(
            x, self.gamma.data, self.beta.data, self.running_mean, self.running_var,
            train=train, momentum=self.momentum, eps=self.eps,
        )
        return out

    def backward(self, dout):
        dx, dg, db = F.batchnorm2d_backward(dout, self._cache)
        self.gamma.accumulate(dg)
        self.beta.accumulate(db)
        self._cache = None
        return dx


class Flatten(Module):
    def forward(self, x, train=False, rng=None):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._cache)


class Reshape(Module):
    def __init__(self, *shape):
        super().__init__()
        self.shape = shape

    def forward(self, x, train=False, rng=None):
        self._cache = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, dout):
        return dout.reshape(self._cache)


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)

    def children(self):
        return self.layers

    def __getitem__(self, i):
        return self.layers[i]

    def __len__(self):
        return len(self.layers)

    def forward(self, x, train=False, rng=None):
        for layer in self.layers:
            x = layer.forward(x, train=train, rng=rng)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def reset_parameters(self, rng, gain=1.0):
        for layer in self.layers:
            if hasattr(layer, "reset_parameters"):
                layer.reset_parameters(rng, gain)
