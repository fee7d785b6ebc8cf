"""Dense NCHW arrays and flattened channel-plane views.

Tensors are plain C-contiguous numpy arrays in (batch, channel, height, width)
order, so one channel plane is a contiguous run of ``H * W`` values and the
flattened position of pixel ``(h, w)`` is ``h * W + w``.
"""
from __future__ import annotations

from typing import Sequence, Union

import numpy as np

Number = Union[int, float]


def create(shape: Sequence[int], fill: Union[Number, Sequence[Number], np.ndarray] = 0.0,
           dtype=np.float64) -> np.ndarray:
    """Build a 4-D tensor from a scalar fill or a row-major value list."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4:
        raise ValueError(f"expected 4 extents, got {len(shape)}")
    if any(s < 0 for s in shape):
        raise ValueError(f"extents must be nonnegative: {shape}")
    if np.isscalar(fill):
        return np.full(shape, fill, dtype=dtype)
    values = np.asarray(fill, dtype=dtype).ravel()
    n = int(np.prod(shape))
    if values.size != n:
        raise ValueError(f"value list has {values.size} entries, shape {shape} needs {n}")
    return values.reshape(shape).copy()


def linear_index(shape: Sequence[int], b: int, c: int, h: int, w: int) -> int:
    _, C, H, W = shape
    return ((b * C + c) * H + h) * W + w


def flat_index(h, w, width):
    """Flattened position of ``(h, w)`` in a plane of the given width.

    No bounds checking; works elementwise on arrays too.
    """
    return h * width + w


def unflatten(p, width):
    return p // width, p % width


def flat_view(x: np.ndarray, b: int, c: int) -> np.ndarray:
    """Length ``H*W`` view of one channel plane (shares memory with ``x``)."""
    if not x.flags.c_contiguous:
        raise ValueError("flat views need a C-contiguous tensor")
    return x[b, c].reshape(-1)


def elementwise(kind: str, a: np.ndarray, b=None) -> np.ndarray:
    """Pointwise ``add``, ``mul``, ``scale`` or ``relu``.

    Binary ops take either a same-shape array or a scalar; there is no
    broadcasting between arrays of different shapes.
    """
    if kind == "relu":
        return np.maximum(a, 0)
    if b is None:
        raise ValueError(f"{kind} needs a second operand")
    if not np.isscalar(b):
        b = np.asarray(b)
        if b.shape != a.shape:
            raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if kind == "add":
        return a + b
    if kind == "mul":
        return a * b
    if kind == "scale":
        if not np.isscalar(b):
            raise ValueError("scale takes a scalar factor")
        return a * b
    raise ValueError(f"unknown elementwise op {kind!r}")
