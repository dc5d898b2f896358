"""Stateful layers with explicit forward/backward passes.

A layer owns :class:`Param` objects.  ``forward(x, train)`` caches whatever the
backward pass needs; ``backward(dout)`` accumulates into ``param.grad`` and
returns the gradient with respect to the layer input.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, DegenerateBatchError, DimensionMismatchError


@dataclass(eq=False)
class Param:
    name: str
    value: np.ndarray
    trainable: bool = True
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    @property
    def size(self) -> int:
        return int(self.value.size)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(tc.get_dtype())


class Layer:
    """Base class; subclasses register params in ``self._params`` and children in ``self._children``."""

    def __init__(self, name: str):
        self.name = name
        self._params: list[Param] = []
        self._children: list[Layer] = []

    def _add_param(self, suffix, value, trainable=True) -> Param:
        p = Param(f"{self.name}.{suffix}", np.asarray(value, dtype=tc.get_dtype()), trainable)
        self._params.append(p)
        return p

    def params(self):
        yield from self._params
        for child in self._children:
            yield from child.params()

    def output_shape(self, shape):
        return shape

    def forward(self, x, train: bool = False):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def __call__(self, x, train: bool = False):
        return self.forward(x, train)

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


class Conv2D(Layer):
    def __init__(self, name, spec: tc.ConvSpec, rng: np.random.Generator):
        super().__init__(name)
        self.spec = spec
        fan_in = spec.kernel * spec.kernel * spec.in_channels
        self.weight = self._add_param("weight", he_normal(rng, spec.weight_shape, fan_in))
        self.bias = self._add_param("bias", np.zeros(spec.out_channels))

    def output_shape(self, shape):
        n, h, w, _ = shape
        return (n, self.spec.output_extent(h), self.spec.output_extent(w), self.spec.out_channels)

    def forward(self, x, train=False):
        out, self._cache = tc.conv2d_forward(x, self.weight.value, self.bias.value, self.spec)
        return out

    def backward(self, dout):
        dx, dw, db = tc.conv2d_backward(dout, self._cache)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class Dense(Layer):
    def __init__(self, name, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__(name)
        self.weight = self._add_param("weight", he_normal(rng, (in_features, out_features), in_features))
        self.bias = self._add_param("bias", np.zeros(out_features))

    def output_shape(self, shape):
        return (shape[0], self.weight.value.shape[1])

    def forward(self, x, train=False):
        out, self._cache = tc.dense_forward(x, self.weight.value, self.bias.value)
        return out

    def backward(self, dout):
        dx, dw, db = tc.dense_backward(dout, self._cache)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class BatchNorm(Layer):
    """Per-channel batch normalization over every axis except the last.

    Running variance is tracked unbiased; the batch normalization itself uses
    the biased estimate.
    """

    def __init__(self, name, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__(name)
        self.momentum = momentum
        self.eps = eps
        self.gamma = self._add_param("gamma", np.ones(channels))
        self.beta = self._add_param("beta", np.zeros(channels))
        self.running_mean = self._add_param("running_mean", np.zeros(channels), trainable=False)
        self.running_var = self._add_param("running_var", np.ones(channels), trainable=False)

    def forward(self, x, train=False):
        c = x.shape[-1]
        if c != self.gamma.value.shape[0]:
            raise DimensionMismatchError("channels", self.gamma.value.shape[0], c)
        axes = tuple(range(x.ndim - 1))
        if train:
            m = x.size // c
            if m < 2:
                raise DegenerateBatchError(f"{self.name}: batch normalization needs >= 2 values per channel, got {m}")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            mom = self.momentum
            self.running_mean.value = (mom * self.running_mean.value + (1 - mom) * mean).astype(x.dtype)
            self.running_var.value = (mom * self.running_var.value + (1 - mom) * var * m / (m - 1)).astype(x.dtype)
        else:
            mean = self.running_mean.value
            var = self.running_var.value
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        self._cache = (xhat, inv_std, train, axes)
        return xhat * self.gamma.value + self.beta.value

    def backward(self, dout):
        xhat, inv_std, train, axes = self._cache
        self.gamma.grad += (dout * xhat).sum(axis=axes)
        self.beta.grad += dout.sum(axis=axes)
        dxhat = dout * self.gamma.value
        if not train:
            return dxhat * inv_std
        m = dout.size // dout.shape[-1]
        return (inv_std / m) * (
            m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes)
        )


class ReLU(Layer):
    def forward(self, x, train=False):
        out, self._cache = tc.relu_forward(x)
        return out

    def backward(self, dout):
        return tc.relu_backward(dout, self._cache)


class MaxPool2D(Layer):
    def __init__(self, name, window: int = 2):
        super().__init__(name)
        self.window = window

    def output_shape(self, shape):
        n, h, w, c = shape
        return (n, h // self.window, w // self.window, c)

    def forward(self, x, train=False):
        out, self._cache = tc.maxpool2d_forward(x, self.window, self.window)
        return out

    def backward(self, dout):
        return tc.maxpool2d_backward(dout, self._cache)


class GlobalAvgPool(Layer):
    def output_shape(self, shape):
        return (shape[0], shape[3])

    def forward(self, x, train=False):
        out, self._cache = tc.global_avg_pool_forward(x)
        return out

    def backward(self, dout):
        return tc.global_avg_pool_backward(dout, self._cache)


class Flatten(Layer):
    def output_shape(self, shape):
        return (shape[0], int(np.prod(shape[1:])))

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)`` so inference is the identity."""

    def __init__(self, name, rate: float, rng: np.random.Generator):
        super().__init__(name)
        if not 0 <= rate < 1:
            raise ConfigError(f"{name}: dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng
        self.enabled = True

    def forward(self, x, train=False):
        if not train or self.rate == 0 or not self.enabled:
            self._mask = None
            return x
        keep = self.rng.random(x.shape) >= self.rate
        self._mask = keep.astype(x.dtype) / x.dtype.type(1 - self.rate)
        return x * self._mask

    def backward(self, dout):
        if self._mask is None:
            return dout
        return dout * self._mask


class SEBlock(Layer):
    """Channel attention: squeeze by spatial mean, excite through a bias-free
    bottleneck ``sigmoid(relu(z @ w1) @ w2)``, then rescale each channel."""

    def __init__(self, name, channels: int, reduction: int, rng: np.random.Generator):
        super().__init__(name)
        if reduction < 1 or channels % reduction:
            raise ConfigError(f"{name}: reduction {reduction} must divide channels {channels}")
        hidden = channels // reduction
        self.w1 = self._add_param("w1", he_normal(rng, (channels, hidden), channels))
        self.w2 = self._add_param("w2", he_normal(rng, (hidden, channels), hidden))

    def forward(self, x, train=False):
        c = self.w1.value.shape[0]
        if x.shape[-1] != c:
            raise DimensionMismatchError("channels", c, x.shape[-1])
        z, _ = tc.global_avg_pool_forward(x)
        pre = z @ self.w1.value
        h = np.maximum(pre, 0)
        s = tc.sigmoid(h @ self.w2.value)
        self._cache = (x, z, pre, h, s)
        self.last_scale = s
        return x * s[:, None, None, :]

    def backward(self, dout):
        x, z, pre, h, s = self._cache
        dx = dout * s[:, None, None, :]
        ds = (dout * x).sum(axis=(1, 2))
        dlogit = tc.sigmoid_backward(ds, s)
        self.w2.grad += h.T @ dlogit
        dpre = tc.relu_backward(dlogit @ self.w2.value.T, pre)
        self.w1.grad += z.T @ dpre
        dz = dpre @ self.w1.value.T
        return dx + tc.global_avg_pool_backward(dz, x.shape)


@dataclass(frozen=True)
class ResidualBlockConfig:
    in_channels: int
    out_channels: int
    attach_se: bool = False
    se_reduction: int = 16
    conv_count: int = 2

    @property
    def use_projection(self) -> bool:
        return self.in_channels != self.out_channels

    def __post_init__(self):
        if self.conv_count != 2:
            raise ConfigError("residual blocks use exactly two convolutions")
        if self.attach_se and self.out_channels % self.se_reduction:
            raise ConfigError("se_reduction must divide out_channels")


class ResidualBlock(Layer):
    """``Y = F(X) + skip(X)`` with ``F = ReLU(BN(Conv(ReLU(BN(Conv(X))))))``.

    The optional SE block rescales ``F(X)`` before the addition.  The skip is the
    identity when channel counts agree, otherwise a 1x1 conv followed by BN.
    """

    def __init__(self, name, cfg: ResidualBlockConfig, rng: np.random.Generator,
                 bn_momentum: float = 0.9, bn_eps: float = 1e-5):
        super().__init__(name)
        self.cfg = cfg
        cin, cout = cfg.in_channels, cfg.out_channels
        self.branch = [
            Conv2D(f"{name}.conv1", tc.ConvSpec(cin, cout), rng),
            BatchNorm(f"{name}.bn1", cout, bn_momentum, bn_eps),
            ReLU(f"{name}.relu1"),
            Conv2D(f"{name}.conv2", tc.ConvSpec(cout, cout), rng),
            BatchNorm(f"{name}.bn2", cout, bn_momentum, bn_eps),
            ReLU(f"{name}.relu2"),
        ]
        if cfg.attach_se:
            self.branch.append(SEBlock(f"{name}.se", cout, cfg.se_reduction, rng))
        self.skip = []
        if cfg.use_projection:
            self.skip = [
                Conv2D(f"{name}.proj", tc.ConvSpec(cin, cout, kernel=1, padding=0), rng),
                BatchNorm(f"{name}.proj_bn", cout, bn_momentum, bn_eps),
            ]
        self._children = self.branch + self.skip

    def output_shape(self, shape):
        return (*shape[:3], self.cfg.out_channels)

    def forward(self, x, train=False):
        if x.shape[-1] != self.cfg.in_channels:
            raise DimensionMismatchError("channels", self.cfg.in_channels, x.shape[-1])
        out = x
        for layer in self.branch:
            out = layer.forward(out, train)
        skip = x
        for layer in self.skip:
            skip = layer.forward(skip, train)
        return out + skip

    def backward(self, dout):
        d_branch = dout
        for layer in reversed(self.branch):
            d_branch = layer.backward(d_branch)
        d_skip = dout
        for layer in reversed(self.skip):
            d_skip = layer.backward(d_skip)
        return d_branch + d_skip
