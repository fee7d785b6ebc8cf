"""Executable networks built from :class:`~onedconv.accounting.ModelGraph`.

Every layer keeps its parameters in ``params`` and fills ``grads`` with the
same keys on ``backward``. Parameter names are ``<layer>.<field>``, so a
vanilla and a dynamic build of one graph share names (and, through the
name-keyed initialiser, the same main weights).
"""
from __future__ import annotations

import zlib
from collections import OrderedDict
from typing import Dict, Iterator, List

import numpy as np

from . import nn
from .accounting import LayerDescriptor, ModelGraph
from .onedconv import ShapeConvWeights, offset_deviation, onedconv_backward, onedconv_forward


def layer_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


class Layer:
    def __init__(self, name: str):
        self.name = name
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.buffers: Dict[str, np.ndarray] = {}

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError

    def children(self) -> Iterator["Layer"]:
        return iter(())


class Conv(Layer):
    def __init__(self, desc: LayerDescriptor, seed: int, dtype):
        super().__init__(desc.name)
        self.spec = s = desc.spec
        fan_in = s.in_channels * s.kernel ** 2
        bound = np.sqrt(6.0 / fan_in)
        rng = layer_rng(seed, self.name)
        self.params["weight"] = rng.uniform(
            -bound, bound, (s.out_channels, s.in_channels, s.kernel, s.kernel)).astype(dtype)
        if s.has_bias:
            self.params["bias"] = np.zeros(s.out_channels, dtype)

    def _weights(self):
        return nn.ConvWeights(self.params["weight"], self.params.get("bias"))

    def forward(self, x, train=False):
        self.x = x
        return nn.conv2d_forward(x, self.spec, self._weights())

    def backward(self, g):
        dx, dk, db = nn.conv2d_backward(self.x, self.spec, self._weights(), g)
        self.grads["weight"] = dk
        if db is not None:
            self.grads["bias"] = db
        return dx


class OneDConv(Conv):
    """Conv whose row filters move with a learned per-location shape.

    The shape conv starts at zero, so a fresh layer computes exactly the dense
    convolution of its main weights.
    """

    def __init__(self, desc: LayerDescriptor, seed: int, dtype):
        super().__init__(desc, seed, dtype)
        zero = ShapeConvWeights.zeros(self.spec, dtype)
        self.params["shape_weight"] = zero.kernel
        self.params["shape_bias"] = zero.bias
        self.record_offsets = False
        self.last_offsets = None

    @property
    def padded_width(self) -> int:
        return self.x.shape[3] + 2 * self.spec.padding

    def forward(self, x, train=False):
        self.x = x
        sw = ShapeConvWeights(self.params["shape_weight"], self.params["shape_bias"])
        y, self.cache = onedconv_forward(x, self.spec, self._weights(), sw)
        if self.record_offsets:
            self.last_offsets = self.cache.offsets
        return y

    def backward(self, g):
        grads = onedconv_backward(self.cache, g)
        self.grads["weight"] = grads.kernel
        if self.spec.has_bias:
            self.grads["bias"] = grads.bias
        self.grads["shape_weight"] = grads.shape_kernel
        self.grads["shape_bias"] = grads.shape_bias
        return grads.x

    def deviation(self) -> np.ndarray:
        return offset_deviation(self.last_offsets, self.padded_width)


class BatchNorm(Layer):
    def __init__(self, desc: LayerDescriptor, dtype):
        super().__init__(desc.name)
        c = desc.in_shape[0]
        self.params["weight"] = np.ones(c, dtype)
        self.params["bias"] = np.zeros(c, dtype)
        self.buffers["running_mean"] = np.zeros(c, dtype)
        self.buffers["running_var"] = np.ones(c, dtype)

    def forward(self, x, train=False):
        y, self.cache = nn.batchnorm_forward(
            x, self.params["weight"], self.params["bias"],
            self.buffers["running_mean"], self.buffers["running_var"], train)
        return y

    def backward(self, g):
        dx, self.grads["weight"], self.grads["bias"] = nn.batchnorm_backward(self.cache, g)
        return dx


class ReLU(Layer):
    def forward(self, x, train=False):
        self.mask = x > 0
        return x * self.mask

    def backward(self, g):
        return g * self.mask


class MaxPool(Layer):
    def __init__(self, desc):
        super().__init__(desc.name)
        self.k, self.stride = desc.pool, desc.pool_stride

    def forward(self, x, train=False):
        y, self.cache = nn.maxpool_forward(x, self.k, self.stride)
        return y

    def backward(self, g):
        return nn.maxpool_backward(self.cache, g)


class AvgPool(Layer):
    def __init__(self, desc):
        super().__init__(desc.name)
        self.k, self.stride = desc.pool, desc.pool_stride

    def forward(self, x, train=False):
        y, self.cache = nn.avgpool_forward(x, self.k, self.stride)
        return y

    def backward(self, g):
        return nn.avgpool_backward(self.cache, g)


class Flatten(Layer):
    def forward(self, x, train=False):
        self.shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g):
        return g.reshape(self.shape)


class Linear(Layer):
    def __init__(self, desc, seed, dtype):
        super().__init__(desc.name)
        n_in, n_out = desc.features
        bound = 1.0 / np.sqrt(n_in)
        rng = layer_rng(seed, self.name)
        self.params["weight"] = rng.uniform(-bound, bound, (n_out, n_in)).astype(dtype)
        self.params["bias"] = np.zeros(n_out, dtype)

    def forward(self, x, train=False):
        self.x = x
        return nn.fc_forward(x, self.params["weight"], self.params["bias"])

    def backward(self, g):
        dx, self.grads["weight"], self.grads["bias"] = nn.fc_backward(self.x, self.params["weight"], g)
        return dx


class Sequential(Layer):
    def __init__(self, name, layers: List[Layer]):
        super().__init__(name)
        self.layers = layers

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def children(self):
        return iter(self.layers)


class Residual(Layer):
    def __init__(self, name, body: Sequential, shortcut: Sequential):
        super().__init__(name)
        self.body, self.shortcut = body, shortcut

    def forward(self, x, train=False):
        return self.body.forward(x, train) + self.shortcut.forward(x, train)

    def backward(self, g):
        return self.body.backward(g) + self.shortcut.backward(g)

    def children(self):
        return iter((self.body, self.shortcut))


def _build(descs, seed, dtype) -> List[Layer]:
    out = []
    for d in descs:
        if d.kind == "conv":
            out.append(Conv(d, seed, dtype))
        elif d.kind == "onedconv":
            out.append(OneDConv(d, seed, dtype))
        elif d.kind == "bn":
            out.append(BatchNorm(d, dtype))
        elif d.kind == "relu":
            out.append(ReLU(d.name))
        elif d.kind == "maxpool":
            out.append(MaxPool(d))
        elif d.kind == "avgpool":
            out.append(AvgPool(d))
        elif d.kind == "flatten":
            out.append(Flatten(d.name))
        elif d.kind == "fc":
            out.append(Linear(d, seed, dtype))
        elif d.kind == "residual":
            out.append(Residual(d.name, Sequential(d.name + ".body", _build(d.body, seed, dtype)),
                                Sequential(d.name + ".shortcut", _build(d.shortcut, seed, dtype))))
        else:
            raise ValueError(f"cannot execute layer kind {d.kind!r}")
    return out


class Network:
    def __init__(self, graph: ModelGraph, seed: int = 0, dtype=np.float32):
        self.graph = graph
        self.dtype = np.dtype(dtype)
        self.root = Sequential(graph.name, _build(graph.layers, seed, self.dtype))

    def forward(self, x, train=False):
        return self.root.forward(np.asarray(x, dtype=self.dtype), train)

    def backward(self, g):
        return self.root.backward(np.asarray(g, dtype=self.dtype))

    def layers(self) -> Iterator[Layer]:
        def walk(layer):
            yield layer
            for child in layer.children():
                yield from walk(child)
        return walk(self.root)

    def dynamic_layers(self) -> List[OneDConv]:
        return [l for l in self.layers() if isinstance(l, OneDConv)]

    def parameters(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((f"{l.name}.{k}", v) for l in self.layers() for k, v in l.params.items())

    def gradients(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((f"{l.name}.{k}", l.grads[k].astype(self.dtype, copy=False))
                           for l in self.layers() for k in l.params)

    def state(self) -> "OrderedDict[str, np.ndarray]":
        """Parameters followed by buffers, in a fixed order."""
        state = self.parameters()
        for l in self.layers():
            for k, v in l.buffers.items():
                state[f"{l.name}.{k}"] = v
        return state

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        own = self.state()
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)[:3]}...")
        for name, arr in own.items():
            if state[name].shape != arr.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {arr.shape}")
            arr[...] = state[name]
