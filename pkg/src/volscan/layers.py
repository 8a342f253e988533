"""Stateful layer wrappers around the primitives in :mod:`volscan.tensor`.

Each layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``ParamTensor.grad`` during
``backward``. A layer therefore serves one forward/backward pair at a time.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import ParamTensor, RunningStats


def uniform_init(rng, shape, fan_in, dtype=np.float32):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    def params(self):
        return []

    def stats(self):
        """Named running statistics (batch norm only)."""
        return []

    def forward(self, x, train):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def _cached(self):
        if self._cache is None:
            raise ContractError(f"{type(self).__name__}.backward called without a cached forward pass")
        cache, self._cache = self._cache, None
        return cache


class Conv(Layer):
    """3x3 same-padded convolution; ``rank`` 2 for slices, 3 for volumes."""

    def __init__(self, name, cin, cout, rng, rank=2, bias=True, dtype=np.float32):
        k = (3,) * rank
        fan_in = cin * 3**rank
        self.rank = rank
        self.weight = ParamTensor(f"{name}.weight", uniform_init(rng, (cout, cin) + k, fan_in, dtype))
        self.bias = ParamTensor(f"{name}.bias", np.zeros(cout, dtype)) if bias else None
        # the first layer of a model can skip its (unused) input gradient
        self.input_grad = True
        self._cache = None

    def params(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def forward(self, x, train):
        self._cache = x
        b = self.bias.value if self.bias is not None else None
        fwd = T.conv2d if self.rank == 2 else T.conv3d
        return fwd(x, self.weight.value, b)

    def backward(self, dout):
        x = self._cached()
        bwd = T.conv2d_backward if self.rank == 2 else T.conv3d_backward
        dx, dw, db = bwd(dout, x, self.weight.value, self.input_grad)
        self.weight.grad += dw
        if self.bias is not None:
            self.bias.grad += db
        return dx


class BatchNorm(Layer):
    def __init__(self, name, channels, dtype=np.float32):
        self.name = name
        self.gamma = ParamTensor(f"{name}.gamma", np.ones(channels, dtype))
        self.beta = ParamTensor(f"{name}.beta", np.zeros(channels, dtype))
        self.running = RunningStats.zeros(channels, dtype)
        self._cache = None

    def params(self):
        return [self.gamma, self.beta]

    def stats(self):
        return [(self.name, self.running)]

    def forward(self, x, train):
        out, self._cache = T.batchnorm(x, self.gamma.value, self.beta.value, self.running, train)
        return out

    def backward(self, dout):
        dx, dg, db = T.batchnorm_backward(dout, self._cached())
        self.gamma.grad += dg
        self.beta.grad += db
        return dx


class ReLU(Layer):
    def __init__(self):
        self._cache = None

    def forward(self, x, train):
        self._cache = x
        return T.relu(x)

    def backward(self, dout):
        return T.relu_backward(dout, self._cached())


class MaxPool(Layer):
    """Max pooling over the trailing axes with the given window.

    With ``crop=True`` trailing elements that do not fill a window are
    dropped (their gradient is zero) instead of raising.
    """

    def __init__(self, window=(2, 2), crop=False):
        self.window = tuple(window)
        self.crop = crop
        self._cache = None

    def forward(self, x, train):
        full_shape = x.shape
        if self.crop:
            rank = len(self.window)
            keep = tuple(slice(0, s - s % w) for s, w in zip(x.shape[-rank:], self.window))
            x = x[(Ellipsis,) + keep]
        out, arg = T.maxpool(x, self.window)
        self._cache = (arg, x.shape, full_shape)
        return out

    def backward(self, dout):
        arg, shape, full_shape = self._cached()
        dx = T.maxpool_backward(dout, arg, shape, self.window)
        if shape != full_shape:
            full = np.zeros(full_shape, dtype=dx.dtype)
            full[tuple(slice(0, s) for s in shape)] = dx
            dx = full
        return dx


class Dense(Layer):
    def __init__(self, name, features, rng, outputs=1, dtype=np.float32):
        self.weight = ParamTensor(f"{name}.weight", uniform_init(rng, (outputs, features), features, dtype))
        self.bias = ParamTensor(f"{name}.bias", np.zeros(outputs, dtype))
        self._cache = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, train):
        self._cache = x
        return T.dense(x, self.weight.value, self.bias.value)

    def backward(self, dout):
        dx, dw, db = T.dense_backward(dout, self._cached(), self.weight.value)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def stats(self):
        return [s for layer in self.layers for s in layer.stats()]

    def forward(self, x, train):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
            if dout is None:
                break
        return dout


def conv_block(name, cin, cout, rng, rank=2, dtype=np.float32):
    """conv -> batch norm -> ReLU. The conv has no bias; batch norm's shift replaces it."""
    return [Conv(f"{name}.conv", cin, cout, rng, rank, bias=False, dtype=dtype),
            BatchNorm(f"{name}.bn", cout, dtype), ReLU()]
