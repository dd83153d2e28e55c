"""Stateful layer wrappers around the kernels in :mod:`res3d.ops`.

A layer owns its parameters and, after a forward call made with
``keep_cache=True``, whatever the backward kernel needs. ``backward``
stores parameter gradients on the parameters and returns one gradient per
forward input.
"""

from __future__ import annotations

import math

import numpy as np

from res3d import ops
from res3d.errors import ConfigurationError, DimensionError


class Parameter:
    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = data
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Parameter(shape={self.data.shape}, dtype={self.data.dtype})"


class Layer:
    kind = "layer"

    def __init__(self):
        self.params = {}
        self.buffers = {}
        self._cache = None

    def forward(self, *inputs, training=False, keep_cache=False):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def output_shape(self, *shapes):
        return shapes[0]

    def num_params(self):
        return sum(p.size for p in self.params.values())

    def clear_cache(self):
        self._cache = None

    def _take_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{type(self).__name__}.backward called before a cached forward")
        cache, self._cache = self._cache, None
        return cache

    def astype(self, dtype):
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        for k, v in self.buffers.items():
            self.buffers[k] = v.astype(dtype)
        return self

    def describe(self):
        return self.kind


class Conv3d(Layer):
    kind = "conv"

    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, groups=1, bias=False,
                 rng=None, dtype=np.float32):
        super().__init__()
        self.kernel = ops._triple(kernel)
        self.stride = ops._triple(stride)
        self.padding = ops._triple(padding)
        if groups < 1 or in_ch % groups or out_ch % groups:
            raise ConfigurationError(
                f"conv channels ({in_ch} -> {out_ch}) not divisible by groups={groups}"
            )
        if min(self.stride) < 1 or min(self.padding) < 0 or min(self.kernel) < 1:
            raise ConfigurationError(
                f"invalid conv geometry kernel={self.kernel} stride={self.stride} padding={self.padding}"
            )
        self.in_ch, self.out_ch, self.groups = in_ch, out_ch, groups
        shape = (out_ch, in_ch // groups) + self.kernel
        # He initialisation, fan-out mode
        fan_out = out_ch * math.prod(self.kernel)
        std = math.sqrt(2.0 / fan_out)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = Parameter((rng.standard_normal(shape) * std).astype(dtype))
        if bias:
            self.params["bias"] = Parameter(np.zeros(out_ch, dtype=dtype))

    def forward(self, x, training=False, keep_cache=False):
        bias = self.params.get("bias")
        out, cache = ops.conv3d_forward(
            x, self.params["weight"].data, None if bias is None else bias.data,
            self.stride, self.padding, self.groups,
        )
        if keep_cache:
            self._cache = cache
        return out

    def backward(self, grad_out):
        gx, gw, gb = ops.conv3d_backward(grad_out, self._take_cache())
        self.params["weight"].grad = gw
        if "bias" in self.params:
            self.params["bias"].grad = gb
        return (gx,)

    def output_shape(self, shape):
        B, C, *dims = shape
        if C != self.in_ch:
            raise DimensionError(f"conv expects {self.in_ch} channels, got {C}")
        out = tuple(
            ops.conv_output_size(n, k, s, p)
            for n, k, s, p in zip(dims, self.kernel, self.stride, self.padding)
        )
        if min(out) < 1:
            raise ConfigurationError(f"conv output extent {out} non-positive for input {shape}")
        return (B, self.out_ch) + out

    def describe(self):
        k = "x".join(map(str, self.kernel))
        s = "x".join(map(str, self.stride))
        g = f" g{self.groups}" if self.groups > 1 else ""
        return f"conv {k} s{s}{g}"


class BatchNorm3d(Layer):
    kind = "bn"

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        if eps <= 0 or not 0 < momentum < 1:
            raise ConfigurationError("batchnorm needs eps > 0 and momentum in (0, 1)")
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.params["gamma"] = Parameter(np.ones(channels, dtype=dtype))
        self.params["beta"] = Parameter(np.zeros(channels, dtype=dtype))
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def forward(self, x, training=False, keep_cache=False):
        out, cache = ops.batchnorm3d_forward(
            x, self.params["gamma"].data, self.params["beta"].data,
            self.buffers["running_mean"], self.buffers["running_var"],
            training=training, momentum=self.momentum, eps=self.eps,
        )
        if keep_cache:
            self._cache = cache
        return out

    def backward(self, grad_out):
        gx, gg, gb = ops.batchnorm3d_backward(grad_out, self._take_cache())
        self.params["gamma"].grad = gg
        self.params["beta"].grad = gb
        return (gx,)

    def output_shape(self, shape):
        if shape[1] != self.channels:
            raise DimensionError(f"batchnorm expects {self.channels} channels, got {shape[1]}")
        return shape


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=False, keep_cache=False):
        out, mask = ops.relu_forward(x)
        if keep_cache:
            self._cache = mask
        return out

    def backward(self, grad_out):
        return (ops.relu_backward(grad_out, self._take_cache()),)


class MaxPool3d(Layer):
    kind = "maxpool"

    def __init__(self, kernel, stride=None, padding=0):
        super().__init__()
        self.kernel = ops._triple(kernel)
        self.stride = self.kernel if stride is None else ops._triple(stride)
        self.padding = ops._triple(padding)

    def forward(self, x, training=False, keep_cache=False):
        out, cache = ops.maxpool3d_forward(x, self.kernel, self.stride, self.padding)
        if keep_cache:
            self._cache = cache
        return out

    def backward(self, grad_out):
        return (ops.maxpool3d_backward(grad_out, self._take_cache()),)

    def output_shape(self, shape):
        dims = tuple(
            ops.conv_output_size(n, k, s, p)
            for n, k, s, p in zip(shape[2:], self.kernel, self.stride, self.padding)
        )
        if min(dims) < 1:
            raise ConfigurationError(f"maxpool output extent {dims} non-positive for {shape}")
        return shape[:2] + dims


class AvgPool3d(Layer):
    kind = "avgpool"

    def __init__(self, kernel, stride=None):
        super().__init__()
        self.kernel = ops._triple(kernel)
        self.stride = self.kernel if stride is None else ops._triple(stride)

    def forward(self, x, training=False, keep_cache=False):
        out, cache = ops.avgpool3d_forward(x, self.kernel, self.stride)
        if keep_cache:
            self._cache = cache
        return out

    def backward(self, grad_out):
        return (ops.avgpool3d_backward(grad_out, self._take_cache()),)

    def output_shape(self, shape):
        dims = tuple(
            ops.conv_output_size(n, k, s, 0) for n, k, s in zip(shape[2:], self.kernel, self.stride)
        )
        if min(dims) < 1:
            raise ConfigurationError(f"avgpool output extent {dims} non-positive for {shape}")
        return shape[:2] + dims


class GlobalAvgPool(Layer):
    kind = "gap"

    def forward(self, x, training=False, keep_cache=False):
        out, shape = ops.global_avg_pool_forward(x)
        if keep_cache:
            self._cache = shape
        return out

    def backward(self, grad_out):
        return (ops.global_avg_pool_backward(grad_out, self._take_cache()),)

    def output_shape(self, shape):
        return shape[:2]


class Linear(Layer):
    kind = "linear"

    def __init__(self, in_features, out_features, rng=None, dtype=np.float32, zero_init=False):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        if zero_init:
            weight = np.zeros((out_features, in_features), dtype=dtype)
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            bound = 1.0 / math.sqrt(in_features)
            weight = rng.uniform(-bound, bound, (out_features, in_features)).astype(dtype)
        self.params["weight"] = Parameter(weight)
        self.params["bias"] = Parameter(np.zeros(out_features, dtype=dtype))

    def forward(self, x, training=False, keep_cache=False):
        out, cache = ops.linear_forward(x, self.params["weight"].data, self.params["bias"].data)
        if keep_cache:
            self._cache = cache
        return out

    def backward(self, grad_out):
        gx, gw, gb = ops.linear_backward(grad_out, self._take_cache())
        self.params["weight"].grad = gw
        self.params["bias"].grad = gb
        return (gx,)

    def output_shape(self, shape):
        if shape[1] != self.in_features:
            raise DimensionError(f"linear expects {self.in_features} features, got {shape[1]}")
        return (shape[0], self.out_features)


class Add(Layer):
    kind = "add"

    def forward(self, a, b, training=False, keep_cache=False):
        if a.shape != b.shape:
            raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}")
        if keep_cache:
            self._cache = True
        return a + b

    def backward(self, grad_out):
        self._take_cache()
        return (grad_out, grad_out)

    def output_shape(self, a, b):
        if a != b:
            raise DimensionError(f"cannot add shapes {a} and {b}")
        return a


class Concat(Layer):
    kind = "concat"

    def forward(self, *inputs, training=False, keep_cache=False):
        out, sizes = ops.concat_channels_forward(list(inputs))
        if keep_cache:
            self._cache = sizes
        return out

    def backward(self, grad_out):
        return tuple(ops.concat_channels_backward(grad_out, self._take_cache()))

    def output_shape(self, *shapes):
        ref = shapes[0]
        for s in shapes[1:]:
            if s[:1] + s[2:] != ref[:1] + ref[2:]:
                raise DimensionError(f"concat shape mismatch {ref} vs {s}")
        return (ref[0], sum(s[1] for s in shapes)) + tuple(ref[2:])
