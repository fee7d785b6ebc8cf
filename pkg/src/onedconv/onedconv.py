"""The one-dimensional dynamic convolution operator.

A ``K x K`` kernel is read as ``K`` row filters of length ``K``. A small
auxiliary convolution (the shape conv) predicts, for every output location,
``K - 1`` deltas to the gaps between adjacent row filters. Gaps are measured on
the flattened, zero-padded input plane, where the gap of a square kernel is
exactly the padded width ``W_pad``. Row filters then sample the flattened plane
at fractional positions with linear interpolation.

With the shape conv at zero every gap equals ``W_pad`` and the operator is
bit-for-bit the dense convolution in :mod:`onedconv.nn`: both paths build the
same column matrix and contract it with the same matmul.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import _kernels
from .nn import (ConvSpec, ConvWeights, col2im, contract, contract_backward, im2col,
                 pad2d, _check_input)


@dataclass
class ShapeConvWeights:
    kernel: np.ndarray  # (K - 1, C_in, K, K)
    bias: np.ndarray  # (K - 1,)

    @classmethod
    def zeros(cls, spec: ConvSpec, dtype=np.float64) -> "ShapeConvWeights":
        k = spec.kernel
        return cls(np.zeros((k - 1, spec.in_channels, k, k), dtype),
                   np.zeros(k - 1, dtype))

    def check(self, spec: ConvSpec) -> None:
        k = spec.kernel
        want = (k - 1, spec.in_channels, k, k)
        if self.kernel.shape != want or self.bias.shape != (k - 1,):
            raise ValueError(f"shape conv weights {self.kernel.shape}/{self.bias.shape} "
                             f"do not match {want}")


def shape_conv_forward(x: np.ndarray, sw: ShapeConvWeights, stride: int = 1,
                       padding: Optional[int] = None) -> np.ndarray:
    """Per-location gap deltas, shape ``(B, K - 1, Ho, Wo)``. No activation."""
    k = sw.kernel.shape[-1]
    spec = ConvSpec(sw.kernel.shape[1], sw.kernel.shape[0], k, stride, padding)
    _check_input(x, spec)
    cols = im2col(x, k, spec.stride, spec.padding)
    return contract(sw.kernel, cols, sw.bias, spec.output_size(*x.shape[2:]))


def square_offsets(n: int, w_pad: int) -> np.ndarray:
    """Row displacements of a square kernel: ``(i - n//2) * w_pad``."""
    return (np.arange(n) - n // 2) * float(w_pad)


def offsets_from_shape(s: np.ndarray, w_pad: int) -> np.ndarray:
    """Turn gap deltas ``(B, N-1, H, W)`` into row displacements ``(B, N, H, W)``.

    ``gap_j = w_pad + s_j`` separates rows ``j`` and ``j + 1``; the centre row
    stays at 0 and the others accumulate gaps outward from it.
    """
    B, n1, H, W = s.shape
    n = n1 + 1
    c = n // 2
    gap = s + np.asarray(w_pad, dtype=s.dtype)
    d = np.zeros((B, n, H, W), dtype=s.dtype)
    for i in range(c + 1, n):
        d[:, i] = d[:, i - 1] + gap[:, i - 1]
    for i in range(c - 1, -1, -1):
        d[:, i] = d[:, i + 1] - gap[:, i]
    return d


def linear_sample(plane, l: float) -> float:
    """Read a 1-D plane at real position ``l``; zero outside the plane."""
    plane = np.asarray(plane).ravel()
    lo = math.floor(l)
    f = l - lo

    def at(p):
        return plane[p] if 0 <= p < plane.size else 0.0

    return float((1 - f) * at(lo) + f * at(lo + 1))


def sample_positions(offsets: np.ndarray, kernel: int, stride: int, padding: int,
                     in_hw) -> np.ndarray:
    """Flattened sample positions ``(B, N, K, Ho*Wo)`` in the padded plane.

    Output location ``(ho, wo)`` is anchored at the window centre
    ``(ho*stride + K//2, wo*stride + K//2)`` of the padded input; tap ``j`` of
    row filter ``i`` reads ``anchor + (j - K//2) + d_i``.
    """
    B, n, Ho, Wo = offsets.shape
    H, W = in_hw
    w_pad = W + 2 * padding
    half = kernel // 2
    ho = np.arange(Ho) * stride + half
    wo = np.arange(Wo) * stride + half
    anchor = (ho[:, None] * w_pad + wo[None, :]).reshape(-1)
    taps = np.arange(kernel) - half
    base = (anchor[None, :] + taps[:, None]).astype(offsets.dtype)  # (K, L)
    return offsets.reshape(B, n, 1, Ho * Wo) + base[None, None]


class OneDConvCache(NamedTuple):
    x_shape: tuple
    padding: int
    stride: int
    kernel: np.ndarray
    xflat: np.ndarray
    lo: np.ndarray
    frac: np.ndarray
    cols: np.ndarray
    shape_kernel: Optional[np.ndarray]
    shape_cols: Optional[np.ndarray]
    shape_map: Optional[np.ndarray]
    offsets: np.ndarray


class OneDConvGrads(NamedTuple):
    x: np.ndarray
    kernel: np.ndarray
    bias: np.ndarray
    shape_kernel: Optional[np.ndarray]
    shape_bias: Optional[np.ndarray]


def onedconv_apply(x: np.ndarray, kernel: np.ndarray, bias, offsets: np.ndarray,
                   stride: int = 1, padding: Optional[int] = None, _shape=None):
    """Dynamic convolution at a given offset field. Returns ``(y, cache)``."""
    Co, C, n, k = kernel.shape
    if n != k or k % 2 == 0:
        raise ValueError(f"kernel must be square and odd, got {kernel.shape}")
    if x.ndim != 4 or x.shape[1] != C:
        raise ValueError(f"input {x.shape} does not match kernel with {C} input channels")
    padding = k // 2 if padding is None else padding
    B, _, H, W = x.shape
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    if offsets.shape != (B, n, Ho, Wo):
        raise ValueError(f"offset field {offsets.shape} does not match {(B, n, Ho, Wo)}")

    xp = pad2d(x, padding)
    xflat = np.ascontiguousarray(xp.reshape(B, C, -1))
    pos = sample_positions(offsets, k, stride, padding, (H, W)).reshape(B, -1)
    lo_f = np.floor(pos)
    lo = lo_f.astype(np.int64)
    frac = pos - lo_f
    cols = _kernels.gather(xflat, lo, frac).reshape(B, C * n * k, Ho * Wo)
    y = contract(kernel, cols, bias, (Ho, Wo))
    shape_kernel, shape_cols, shape_map = _shape if _shape is not None else (None, None, None)
    cache = OneDConvCache(x.shape, padding, stride, kernel, xflat, lo, frac, cols,
                          shape_kernel, shape_cols, shape_map, offsets)
    return y, cache


def onedconv_forward(x: np.ndarray, spec: ConvSpec, wts: ConvWeights, sw: ShapeConvWeights):
    """Full operator: shape conv -> offsets -> interpolated row filters.

    Returns ``(y, cache)``; the cache carries the shape map and offset field.
    """
    _check_input(x, spec)
    wts.check(spec)
    sw.check(spec)
    k, s, p = spec.kernel, spec.stride, spec.padding
    shape_cols = im2col(x, k, s, p)
    shape_map = contract(sw.kernel, shape_cols, sw.bias, spec.output_size(*x.shape[2:]))
    offsets = offsets_from_shape(shape_map, x.shape[3] + 2 * p)
    bias = wts.bias if spec.has_bias else None
    return onedconv_apply(x, wts.kernel, bias, offsets, s, p,
                          _shape=(sw.kernel, shape_cols, shape_map))


def gap_adjoint(grad_offsets: np.ndarray) -> np.ndarray:
    """Pull ``dL/dd`` (B, N, ...) back to ``dL/ds`` (B, N-1, ...)."""
    n = grad_offsets.shape[1]
    c = n // 2
    out = np.empty((grad_offsets.shape[0], n - 1, *grad_offsets.shape[2:]), grad_offsets.dtype)
    # gap j >= c feeds every row above it; gap j < c feeds (negated) every row at or below it
    tail = np.cumsum(grad_offsets[:, ::-1], axis=1)[:, ::-1]
    head = np.cumsum(grad_offsets, axis=1)
    for j in range(n - 1):
        out[:, j] = tail[:, j + 1] if j >= c else -head[:, j]
    return out


def onedconv_backward(cache: OneDConvCache, grad_y: np.ndarray) -> OneDConvGrads:
    """Gradients of the loss w.r.t. input, kernel, bias and shape-conv weights.

    At integral sample positions the right derivative of the interpolation is
    used. Shape-conv gradients are ``None`` when the cache came from
    :func:`onedconv_apply` with an explicit offset field.
    """
    B, C, H, W = cache.x_shape
    Co, _, n, k = cache.kernel.shape
    Ho, Wo = cache.offsets.shape[2:]
    if grad_y.shape != (B, Co, Ho, Wo):
        raise ValueError(f"grad_y shape {grad_y.shape} does not match output {(B, Co, Ho, Wo)}")
    p = cache.padding
    dcols, dk, db = contract_backward(cache.kernel, cache.cols, grad_y)
    dcols = dcols.reshape(B, C, -1)
    Lp = cache.xflat.shape[2]
    dxp = _kernels.scatter(dcols, cache.lo, cache.frac, Lp).reshape(B, C, H + 2 * p, W + 2 * p)
    dx = np.ascontiguousarray(dxp[:, :, p:p + H, p:p + W])

    dpos = _kernels.slope(cache.xflat, cache.lo, dcols).reshape(B, n, k, Ho * Wo)
    dd = dpos.sum(axis=2).reshape(B, n, Ho, Wo)

    if cache.shape_kernel is None:
        return OneDConvGrads(dx, dk, db, None, None)
    ds = gap_adjoint(dd)
    dscols, dsk, dsb = contract_backward(cache.shape_kernel, cache.shape_cols, ds)
    dx += col2im(dscols, cache.x_shape, k, cache.stride, p)
    return OneDConvGrads(dx, dk, db, dsk, dsb)


def offset_gradient(cache: OneDConvCache, grad_y: np.ndarray) -> np.ndarray:
    """``dL/d(offsets)`` at fixed input, shape ``(B, N, Ho, Wo)``."""
    B = cache.x_shape[0]
    Co, C, n, k = cache.kernel.shape
    Ho, Wo = cache.offsets.shape[2:]
    dcols, _, _ = contract_backward(cache.kernel, cache.cols, grad_y)
    dpos = _kernels.slope(cache.xflat, cache.lo, dcols.reshape(B, C, -1))
    return dpos.reshape(B, n, k, Ho * Wo).sum(axis=2).reshape(B, n, Ho, Wo)


def offset_deviation(offsets: np.ndarray, w_pad: int) -> np.ndarray:
    """``|d_i - square default|`` elementwise."""
    sq = square_offsets(offsets.shape[1], w_pad).astype(offsets.dtype)
    return np.abs(offsets - sq.reshape(1, -1, 1, 1))
