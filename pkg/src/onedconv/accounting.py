"""Model graph descriptors, parameter counts and FLOP accounting.

A :class:`ModelGraph` is an ordered list of :class:`LayerDescriptor` with every
input/output extent resolved when the graph is built. Residual blocks are a
single descriptor holding a ``body`` and a ``shortcut`` (empty = identity).
The same graphs drive the executable networks in :mod:`onedconv.network`.

FLOPs follow the 2-per-multiply-accumulate convention, with the bias counted
as one more accumulate against a constant-one input::

    main     = 2 * H * W * C_out * (C_in * K^2 + 1)
    overhead = 2 * H * W * (K - 1) * (C_in * K^2 + 1)   # shape conv only

where ``H, W`` are the layer's output extents.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, List, NamedTuple, Optional, Tuple

import numpy as np

from .nn import ConvSpec

CONV_KINDS = ("conv", "onedconv")


@dataclass
class LayerDescriptor:
    kind: str
    name: str
    spec: Optional[ConvSpec] = None
    pool: Optional[int] = None  # window for maxpool/avgpool; None = global
    pool_stride: Optional[int] = None
    features: Optional[Tuple[int, int]] = None  # fc (in, out)
    in_shape: Optional[Tuple[int, int, int]] = None
    out_shape: Optional[Tuple[int, int, int]] = None
    body: List["LayerDescriptor"] = field(default_factory=list)
    shortcut: List["LayerDescriptor"] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "name": self.name}
        if self.spec is not None:
            d["spec"] = asdict(self.spec)
        for key in ("pool", "pool_stride", "features", "in_shape", "out_shape"):
            value = getattr(self, key)
            if value is not None:
                d[key] = list(value) if isinstance(value, tuple) else value
        if self.kind == "residual":
            d["body"] = [l.to_dict() for l in self.body]
            d["shortcut"] = [l.to_dict() for l in self.shortcut]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerDescriptor":
        tup = lambda v: tuple(v) if v is not None else None
        return cls(
            kind=d["kind"], name=d["name"],
            spec=ConvSpec(**d["spec"]) if "spec" in d else None,
            pool=d.get("pool"), pool_stride=d.get("pool_stride"),
            features=tup(d.get("features")), in_shape=tup(d.get("in_shape")),
            out_shape=tup(d.get("out_shape")),
            body=[cls.from_dict(x) for x in d.get("body", [])],
            shortcut=[cls.from_dict(x) for x in d.get("shortcut", [])])


@dataclass
class ModelGraph:
    name: str
    input_shape: Tuple[int, int, int]
    classes: int
    layers: List[LayerDescriptor] = field(default_factory=list)

    def leaves(self) -> Iterator[LayerDescriptor]:
        """Every non-residual descriptor in execution order."""
        def walk(layers):
            for layer in layers:
                if layer.kind == "residual":
                    yield from walk(layer.body)
                    yield from walk(layer.shortcut)
                else:
                    yield layer
        return walk(self.layers)

    def to_json(self) -> str:
        return json.dumps({"name": self.name, "input_shape": list(self.input_shape),
                           "classes": self.classes,
                           "layers": [l.to_dict() for l in self.layers]}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ModelGraph":
        d = json.loads(text)
        return cls(d["name"], tuple(d["input_shape"]), d["classes"],
                   [LayerDescriptor.from_dict(x) for x in d["layers"]])


class _Builder:
    """Appends descriptors while tracking the running (C, H, W) extents."""

    def __init__(self, shape, variant):
        if variant not in ("vanilla", "onedconv"):
            raise ValueError(f"variant must be vanilla or onedconv, got {variant!r}")
        self.shape = tuple(shape)
        self.variant = variant
        self.layers: List[LayerDescriptor] = []

    def _add(self, layer: LayerDescriptor, out_shape):
        layer.in_shape, layer.out_shape = self.shape, tuple(out_shape)
        self.shape = layer.out_shape
        self.layers.append(layer)
        return layer

    def conv(self, name, out_ch, k=3, stride=1, bias=False, dynamic=None):
        c, h, w = self.shape
        spec = ConvSpec(c, out_ch, k, stride, None, bias)
        if dynamic is None:
            dynamic = k == 3 and self.variant == "onedconv"
        kind = "onedconv" if dynamic else "conv"
        return self._add(LayerDescriptor(kind, name, spec), (out_ch, *spec.output_size(h, w)))

    def bn(self, name):
        return self._add(LayerDescriptor("bn", name), self.shape)

    def relu(self, name):
        return self._add(LayerDescriptor("relu", name), self.shape)

    def maxpool(self, name, k=2, stride=None):
        stride = k if stride is None else stride
        c, h, w = self.shape
        return self._add(LayerDescriptor("maxpool", name, pool=k, pool_stride=stride),
                         (c, (h - k) // stride + 1, (w - k) // stride + 1))

    def global_avgpool(self, name):
        return self._add(LayerDescriptor("avgpool", name), (self.shape[0], 1, 1))

    def flatten(self, name):
        return self._add(LayerDescriptor("flatten", name), (int(np.prod(self.shape)), 1, 1))

    def fc(self, name, out):
        n = int(np.prod(self.shape))
        return self._add(LayerDescriptor("fc", name, features=(n, out)), (out, 1, 1))

    def basic_block(self, name, out_ch, stride):
        start = self.shape
        body = _Builder(start, self.variant)
        body.conv(f"{name}.conv1", out_ch, 3, stride)
        body.bn(f"{name}.bn1")
        body.relu(f"{name}.relu1")
        body.conv(f"{name}.conv2", out_ch, 3, 1)
        body.bn(f"{name}.bn2")
        short = _Builder(start, self.variant)
        if stride != 1 or start[0] != out_ch:
            short.conv(f"{name}.shortcut.conv", out_ch, 1, stride)
            short.bn(f"{name}.shortcut.bn")
        layer = LayerDescriptor("residual", name, body=body.layers, shortcut=short.layers)
        self._add(layer, body.shape)
        self.relu(f"{name}.relu")


def build_resnet18(variant: str = "vanilla", classes: int = 10, input_shape=(3, 32, 32)) -> ModelGraph:
    """18-layer residual net; every 3x3 conv becomes dynamic in the onedconv variant.

    The stem is a single 3x3 conv with stride 2 and no max pool; 1x1 shortcut
    convs stay dense.
    """
    b = _Builder(input_shape, variant)
    b.conv("conv1", 64, 3, 2)
    b.bn("bn1")
    b.relu("relu1")
    for stage, (ch, stride) in enumerate(zip((64, 128, 256, 512), (1, 2, 2, 2)), start=2):
        b.basic_block(f"conv{stage}_1", ch, stride)
        b.basic_block(f"conv{stage}_2", ch, 1)
    b.global_avgpool("avgpool")
    b.flatten("flatten")
    b.fc("fc", classes)
    return ModelGraph(f"resnet18-{variant}", tuple(input_shape), classes, b.layers)


def build_tiny_cnn(variant: str = "vanilla", classes: int = 10, input_shape=(1, 32, 32),
                   widths=(16, 32)) -> ModelGraph:
    """conv 16 -> BN/ReLU -> pool -> conv 32 -> BN/ReLU -> pool -> fc."""
    b = _Builder(input_shape, variant)
    for i, ch in enumerate(widths, start=1):
        b.conv(f"conv{i}", ch, 3, 1)
        b.bn(f"bn{i}")
        b.relu(f"relu{i}")
        b.maxpool(f"pool{i}", 2)
    b.flatten("flatten")
    b.fc("fc", classes)
    return ModelGraph(f"tiny-cnn-{variant}", tuple(input_shape), classes, b.layers)


MODELS = {"resnet18": build_resnet18, "tiny-cnn": build_tiny_cnn}


def build_model_graph(model: str, variant: str, classes: int = 10, input_shape=None):
    try:
        builder = MODELS[model]
    except KeyError:
        raise ValueError(f"unknown model {model!r}; choose from {sorted(MODELS)}") from None
    if input_shape is None:
        return builder(variant, classes)
    return builder(variant, classes, input_shape)


# counting ---------------------------------------------------------------------

def shape_conv_params(spec: ConvSpec) -> int:
    return (spec.kernel - 1) * (spec.kernel ** 2 * spec.in_channels + 1)


def layer_params(layer: LayerDescriptor) -> int:
    if layer.in_shape is None or layer.out_shape is None:
        raise ValueError(f"layer {layer.name} has unresolved extents")
    if layer.kind in CONV_KINDS:
        s = layer.spec
        n = s.kernel ** 2 * s.in_channels * s.out_channels + (s.out_channels if s.has_bias else 0)
        if layer.kind == "onedconv":
            n += shape_conv_params(s)
        return n
    if layer.kind == "bn":
        return 2 * layer.in_shape[0]
    if layer.kind == "fc":
        i, o = layer.features
        return i * o + o
    if layer.kind == "residual":
        return sum(layer_params(l) for l in layer.body + layer.shortcut)
    return 0


def count_params(graph: ModelGraph) -> int:
    """Trainable parameters (BN running statistics excluded)."""
    return sum(layer_params(l) for l in graph.leaves())


def count_buffers(graph: ModelGraph) -> int:
    """Non-trainable BN running mean/var entries."""
    return sum(2 * l.in_shape[0] for l in graph.leaves() if l.kind == "bn")


def count_flops(layer: LayerDescriptor) -> Tuple[int, int]:
    """Closed-form ``(main, overhead)`` FLOPs; ``(0, 0)`` for non-conv layers."""
    if layer.kind not in CONV_KINDS:
        return 0, 0
    if layer.out_shape is None:
        raise ValueError(f"layer {layer.name} has unresolved extents")
    s = layer.spec
    _, h, w = layer.out_shape
    per_map = s.in_channels * s.kernel ** 2 + 1
    main = 2 * h * w * s.out_channels * per_map
    overhead = 2 * h * w * (s.kernel - 1) * per_map if layer.kind == "onedconv" else 0
    return main, overhead


class LayerRow(NamedTuple):
    name: str
    kind: str
    params: int
    main_flops: int
    overhead_flops: int


def layer_table(graph: ModelGraph) -> List[LayerRow]:
    rows = []
    for layer in graph.leaves():
        main, over = count_flops(layer)
        rows.append(LayerRow(layer.name, layer.kind, layer_params(layer), main, over))
    return rows


# instrumented scalar execution ------------------------------------------------

class FlopCount(NamedTuple):
    main: int
    overhead: int
    interpolation: int

    @property
    def total(self) -> int:
        return self.main + self.overhead + self.interpolation


class _Tally:
    def __init__(self):
        self.counts = {"main": 0, "overhead": 0, "interpolation": 0}
        self.bucket = "main"

    def mac(self, acc, a, b):
        self.counts[self.bucket] += 2
        return acc + a * b

    def add(self, a, b):
        self.counts[self.bucket] += 1
        return a + b

    def mul(self, a, b):
        self.counts[self.bucket] += 1
        return a * b


def _scalar_conv(x, kernel, bias, stride, padding, tally):
    B, C, H, W = x.shape
    Co, _, K, _ = kernel.shape
    Ho = max((H + 2 * padding - K) // stride + 1, 0)
    Wo = max((W + 2 * padding - K) // stride + 1, 0)
    y = np.zeros((B, Co, Ho, Wo))
    for b in range(B):
        for o in range(Co):
            for ho in range(Ho):
                for wo in range(Wo):
                    acc = 0.0
                    for c in range(C):
                        for i in range(K):
                            for j in range(K):
                                r, q = ho * stride + i - padding, wo * stride + j - padding
                                v = x[b, c, r, q] if 0 <= r < H and 0 <= q < W else 0.0
                                acc = tally.mac(acc, kernel[o, c, i, j], v)
                    acc = tally.mac(acc, bias[o], 1.0)
                    y[b, o, ho, wo] = acc
    return y


def _scalar_onedconv(x, kernel, bias, shape_kernel, shape_bias, stride, padding, tally):
    B, C, H, W = x.shape
    Co, _, K, _ = kernel.shape
    half = K // 2
    Hp, Wp = H + 2 * padding, W + 2 * padding
    xp = np.zeros((B, C, Hp * Wp))
    if H and W:
        xp.reshape(B, C, Hp, Wp)[:, :, padding:padding + H, padding:padding + W] = x
    tally.bucket = "overhead"
    s = _scalar_conv(x, shape_kernel, shape_bias, stride, padding, tally)
    Ho, Wo = s.shape[2:]
    y = np.zeros((B, Co, Ho, Wo))
    for b in range(B):
        for ho in range(Ho):
            for wo in range(Wo):
                tally.bucket = "interpolation"
                d = [0.0] * K
                for i in range(half + 1, K):
                    d[i] = tally.add(d[i - 1], tally.add(float(Wp), s[b, i - 1, ho, wo]))
                for i in range(half - 1, -1, -1):
                    d[i] = tally.add(d[i + 1], -tally.add(float(Wp), s[b, i, ho, wo]))
                anchor = (ho * stride + half) * Wp + wo * stride + half
                samples = np.zeros((C, K, K))
                for i in range(K):
                    for j in range(K):
                        pos = tally.add(float(anchor + j - half), d[i])
                        lo = math.floor(pos)
                        f = tally.add(pos, -lo)
                        g = tally.add(1.0, -f)
                        for c in range(C):
                            x0 = xp[b, c, lo] if 0 <= lo < Hp * Wp else 0.0
                            x1 = xp[b, c, lo + 1] if 0 <= lo + 1 < Hp * Wp else 0.0
                            samples[c, i, j] = tally.mac(tally.mul(g, x0), f, x1)
                tally.bucket = "main"
                for o in range(Co):
                    acc = 0.0
                    for c in range(C):
                        for i in range(K):
                            for j in range(K):
                                acc = tally.mac(acc, kernel[o, c, i, j], samples[c, i, j])
                    y[b, o, ho, wo] = tally.mac(acc, bias[o], 1.0)
    return y


def measured_flops(layer: LayerDescriptor, x: np.ndarray, weights=None, seed: int = 0,
                   return_output: bool = False):
    """Count the arithmetic actually executed by a scalar run of ``layer`` on ``x``.

    ``weights`` is ``(kernel, bias)`` or ``(kernel, bias, shape_kernel,
    shape_bias)``; random ones are drawn from ``seed`` when omitted. Offset and
    interpolation arithmetic lands in the ``interpolation`` bucket, the shape
    conv in ``overhead``.
    """
    if layer.kind not in CONV_KINDS:
        return (FlopCount(0, 0, 0), None) if return_output else FlopCount(0, 0, 0)
    s = layer.spec
    if weights is None:
        rng = np.random.default_rng(seed)
        weights = (rng.standard_normal((s.out_channels, s.in_channels, s.kernel, s.kernel)),
                   rng.standard_normal(s.out_channels),
                   rng.uniform(-0.5, 0.5, (s.kernel - 1, s.in_channels, s.kernel, s.kernel)),
                   rng.uniform(-0.5, 0.5, s.kernel - 1))
    tally = _Tally()
    x = np.asarray(x, dtype=np.float64)
    if layer.kind == "conv":
        y = _scalar_conv(x, weights[0], weights[1], s.stride, s.padding, tally)
    else:
        y = _scalar_onedconv(x, *weights[:4], s.stride, s.padding, tally)
    count = FlopCount(**tally.counts)
    return (count, y) if return_output else count
