"""Interpolated gather/scatter kernels on flattened channel planes.

Each kernel exists twice: a numba ``@njit`` loop and a vectorised numpy
version. The numba path is used when numba imports and the environment
variable ``ONEDCONV_DISABLE_NUMBA`` is unset (or ``0``); ``set_backend`` flips
it at runtime, which the benchmark and the parity tests rely on.

Shapes: ``xflat`` is ``(B, C, L)`` (one padded, flattened plane per channel),
``lo``/``frac`` are ``(B, M)`` sample positions shared by all channels, and
columns are ``(B, C, M)``. A position ``p = lo + frac`` reads
``(1 - frac) * x[lo] + frac * x[lo + 1]`` with ``x`` zero outside ``[0, L)``.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


def _env_disabled() -> bool:
    return os.environ.get("ONEDCONV_DISABLE_NUMBA", "0").lower() not in ("", "0", "false", "no")


# numpy path -----------------------------------------------------------------

def _np_weights(lo, frac, length):
    v0 = (lo >= 0) & (lo < length)
    v1 = (lo + 1 >= 0) & (lo + 1 < length)
    i0 = np.clip(lo, 0, length - 1)
    i1 = np.clip(lo + 1, 0, length - 1)
    w0 = np.where(v0, 1 - frac, 0).astype(frac.dtype)
    w1 = np.where(v1, frac, 0).astype(frac.dtype)
    return i0, i1, w0, w1, v0, v1


def _np_take(xflat, idx):
    B, C, _ = xflat.shape
    return np.take_along_axis(xflat, np.broadcast_to(idx[:, None, :], (B, C, idx.shape[1])), axis=2)


def gather_numpy(xflat, lo, frac):
    i0, i1, w0, w1, _, _ = _np_weights(lo, frac, xflat.shape[2])
    return w0[:, None, :] * _np_take(xflat, i0) + w1[:, None, :] * _np_take(xflat, i1)


def scatter_numpy(dcols, lo, frac, length):
    B, C, M = dcols.shape
    i0, i1, w0, w1, _, _ = _np_weights(lo, frac, length)
    base = (np.arange(B * C).reshape(B, C, 1) * length)
    n = B * C * length
    out = np.bincount((base + i0[:, None, :]).ravel(), (dcols * w0[:, None, :]).ravel(), minlength=n)
    out += np.bincount((base + i1[:, None, :]).ravel(), (dcols * w1[:, None, :]).ravel(), minlength=n)
    return out.reshape(B, C, length).astype(dcols.dtype, copy=False)


def slope_numpy(xflat, lo, dcols):
    i0, i1, _, _, v0, v1 = _np_weights(lo, np.zeros(lo.shape, xflat.dtype), xflat.shape[2])
    x0 = np.where(v0[:, None, :], _np_take(xflat, i0), 0)
    x1 = np.where(v1[:, None, :], _np_take(xflat, i1), 0)
    return np.einsum("bcm,bcm->bm", dcols, x1 - x0)


# numba path -----------------------------------------------------------------

if HAVE_NUMBA:
    @njit(cache=True)
    def gather_numba(xflat, lo, frac):
        B, C, L = xflat.shape
        M = lo.shape[1]
        out = np.zeros((B, C, M), xflat.dtype)
        for b in range(B):
            for m in range(M):
                p = lo[b, m]
                f = frac[b, m]
                w0 = 1 - f if 0 <= p < L else 0.0
                w1 = f if 0 <= p + 1 < L else 0.0
                p0 = min(max(p, 0), L - 1)
                p1 = min(max(p + 1, 0), L - 1)
                for c in range(C):
                    out[b, c, m] = w0 * xflat[b, c, p0] + w1 * xflat[b, c, p1]
        return out

    @njit(cache=True)
    def scatter_numba(dcols, lo, frac, length):
        B, C, M = dcols.shape
        out = np.zeros((B, C, length), dcols.dtype)
        for b in range(B):
            for m in range(M):
                p = lo[b, m]
                f = frac[b, m]
                in0 = 0 <= p < length
                in1 = 0 <= p + 1 < length
                for c in range(C):
                    g = dcols[b, c, m]
                    if in0:
                        out[b, c, p] += g * (1 - f)
                    if in1:
                        out[b, c, p + 1] += g * f
        return out

    @njit(cache=True)
    def slope_numba(xflat, lo, dcols):
        B, C, L = xflat.shape
        M = lo.shape[1]
        out = np.zeros((B, M), dcols.dtype)
        for b in range(B):
            for m in range(M):
                p = lo[b, m]
                acc = 0.0
                for c in range(C):
                    x0 = xflat[b, c, p] if 0 <= p < L else 0.0
                    x1 = xflat[b, c, p + 1] if 0 <= p + 1 < L else 0.0
                    acc += dcols[b, c, m] * (x1 - x0)
                out[b, m] = acc
        return out


_BACKEND = "numba" if HAVE_NUMBA and not _env_disabled() else "numpy"


def backend() -> str:
    return _BACKEND


def set_backend(name: str) -> None:
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not importable")
    _BACKEND = name


def gather(xflat, lo, frac):
    xflat = np.ascontiguousarray(xflat)
    if _BACKEND == "numba":
        return gather_numba(xflat, lo, frac.astype(xflat.dtype, copy=False))
    return gather_numpy(xflat, lo, frac.astype(xflat.dtype, copy=False))


def scatter(dcols, lo, frac, length):
    dcols = np.ascontiguousarray(dcols)
    if _BACKEND == "numba":
        return scatter_numba(dcols, lo, frac.astype(dcols.dtype, copy=False), int(length))
    return scatter_numpy(dcols, lo, frac.astype(dcols.dtype, copy=False), int(length))


def slope(xflat, lo, dcols):
    """Per-position sum over channels of ``dcols * (x[lo + 1] - x[lo])``."""
    xflat = np.ascontiguousarray(xflat)
    dcols = np.ascontiguousarray(dcols)
    if _BACKEND == "numba":
        return slope_numba(xflat, lo, dcols)
    return slope_numpy(xflat, lo, dcols)
