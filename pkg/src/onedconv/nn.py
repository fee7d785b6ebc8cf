"""Reference layers: dense conv2d, batch norm, pooling, fc, softmax-CE and SGD.

Everything here is a pair of plain functions, ``*_forward`` returning the
output and whatever the matching ``*_backward`` needs. Convolution goes
through an explicit column matrix (im2col) so the dynamic operator can reuse
the exact same contraction.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: Optional[int] = None
    has_bias: bool = True

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd and >= 1, got {self.kernel}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.padding is None:
            object.__setattr__(self, "padding", self.kernel // 2)

    def output_size(self, h: int, w: int) -> Tuple[int, int]:
        k, s, p = self.kernel, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


@dataclass
class ConvWeights:
    kernel: np.ndarray
    bias: Optional[np.ndarray] = None

    def check(self, spec: ConvSpec) -> None:
        want = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
        if self.kernel.shape != want:
            raise ValueError(f"kernel shape {self.kernel.shape} does not match spec {want}")
        if spec.has_bias and (self.bias is None or self.bias.shape != (spec.out_channels,)):
            raise ValueError("spec wants a bias of length out_channels")


def pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """Columns shaped ``(B, C*k*k, Ho*Wo)``, rows ordered ``(c, i, j)``."""
    B, C, H, W = x.shape
    xp = pad2d(x, padding)
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    cols = np.empty((B, C, k, k, Ho, Wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    return cols.reshape(B, C * k * k, Ho * Wo)


def col2im(dcols: np.ndarray, x_shape, k: int, stride: int, padding: int) -> np.ndarray:
    B, C, H, W = x_shape
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    d = dcols.reshape(B, C, k, k, Ho, Wo)
    dxp = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += d[:, :, i, j]
    return dxp[:, :, padding:padding + H, padding:padding + W]


def contract(kernel: np.ndarray, cols: np.ndarray, bias, out_hw) -> np.ndarray:
    """``kernel`` (Co, ...) against columns (B, R, L) -> (B, Co, Ho, Wo)."""
    Co = kernel.shape[0]
    y = np.matmul(kernel.reshape(Co, cols.shape[1]), cols)
    if bias is not None:
        y += bias.reshape(1, Co, 1)
    return y.reshape(cols.shape[0], Co, *out_hw)


def contract_backward(kernel: np.ndarray, cols: np.ndarray, grad_y: np.ndarray):
    """Return (grad_cols, grad_kernel, grad_bias) for :func:`contract`."""
    B, Co = grad_y.shape[:2]
    g = grad_y.reshape(B, Co, -1)
    k2 = kernel.reshape(Co, cols.shape[1])
    grad_kernel = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(kernel.shape)
    grad_cols = np.matmul(k2.T, g)
    return grad_cols, grad_kernel, g.sum(axis=(0, 2))


def _check_input(x: np.ndarray, spec: ConvSpec) -> None:
    if x.ndim != 4:
        raise ValueError(f"expected a 4-D tensor, got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"input has {x.shape[1]} channels, spec wants {spec.in_channels}")


def conv2d_forward(x: np.ndarray, spec: ConvSpec, wts: ConvWeights) -> np.ndarray:
    _check_input(x, spec)
    wts.check(spec)
    cols = im2col(x, spec.kernel, spec.stride, spec.padding)
    bias = wts.bias if spec.has_bias else None
    return contract(wts.kernel, cols, bias, spec.output_size(*x.shape[2:]))


def conv2d_backward(x: np.ndarray, spec: ConvSpec, wts: ConvWeights, grad_y: np.ndarray):
    """Adjoints of :func:`conv2d_forward`: ``(grad_x, grad_kernel, grad_bias)``.

    ``grad_bias`` is ``None`` when the spec has no bias.
    """
    _check_input(x, spec)
    want = (x.shape[0], spec.out_channels, *spec.output_size(*x.shape[2:]))
    if grad_y.shape != want:
        raise ValueError(f"grad_y shape {grad_y.shape} does not match output {want}")
    cols = im2col(x, spec.kernel, spec.stride, spec.padding)
    dcols, dk, db = contract_backward(wts.kernel, cols, grad_y)
    dx = col2im(dcols, x.shape, spec.kernel, spec.stride, spec.padding)
    return dx, dk, (db if spec.has_bias else None)


# batch norm -------------------------------------------------------------------

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train=True,
                      momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch norm over (batch, height, width).

    In training mode batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance for the running
    estimate). Returns ``(y, cache)``.
    """
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise ValueError(f"batchnorm over {gamma.shape[0]} channels got input {x.shape}")
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        n = x.size // x.shape[1]
        if running_mean is not None:
            running_mean *= 1 - momentum
            running_mean += momentum * mean
            running_var *= 1 - momentum
            running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
    y = gamma.reshape(1, -1, 1, 1) * xhat + beta.reshape(1, -1, 1, 1)
    return y.astype(x.dtype, copy=False), (xhat, inv, gamma, train)


def batchnorm_backward(cache, grad_y):
    xhat, inv, gamma, train = cache
    if grad_y.shape != xhat.shape:
        raise ValueError("grad_y shape mismatch")
    axes = (0, 2, 3)
    dbeta = grad_y.sum(axis=axes)
    dgamma = (grad_y * xhat).sum(axis=axes)
    g = gamma.reshape(1, -1, 1, 1) * grad_y
    if not train:
        return g * inv.reshape(1, -1, 1, 1), dgamma, dbeta
    dx = inv.reshape(1, -1, 1, 1) * (
        g - g.mean(axis=axes, keepdims=True) - xhat * (g * xhat).mean(axis=axes, keepdims=True))
    return dx.astype(grad_y.dtype, copy=False), dgamma, dbeta


# pooling ----------------------------------------------------------------------

def _windows(x, k, stride, padding, fill):
    B, C, H, W = x.shape
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    xp = x if padding == 0 else np.pad(
        x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=fill)
    win = np.empty((B, C, k * k, Ho, Wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            win[:, :, i * k + j] = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    return win


def _unwindows(dwin, x_shape, k, stride, padding):
    B, C, H, W = x_shape
    Ho, Wo = dwin.shape[-2:]
    dxp = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=dwin.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dwin[:, :, i * k + j]
    return dxp[:, :, padding:padding + H, padding:padding + W]


def maxpool_forward(x, k=2, stride=None, padding=0):
    stride = k if stride is None else stride
    win = _windows(x, k, stride, padding, -np.inf)
    arg = win.argmax(axis=2)
    y = np.take_along_axis(win, arg[:, :, None], axis=2)[:, :, 0]
    return y, (x.shape, arg, k, stride, padding)


def maxpool_backward(cache, grad_y):
    x_shape, arg, k, stride, padding = cache
    if grad_y.shape != arg.shape:
        raise ValueError("grad_y shape mismatch")
    B, C, Ho, Wo = grad_y.shape
    dwin = np.zeros((B, C, k * k, Ho, Wo), dtype=grad_y.dtype)
    np.put_along_axis(dwin, arg[:, :, None], grad_y[:, :, None], axis=2)
    return _unwindows(dwin, x_shape, k, stride, padding)


def avgpool_forward(x, k=None, stride=None):
    """Window average pool; ``k=None`` pools the whole plane (global pool)."""
    if k is None:
        return x.mean(axis=(2, 3), keepdims=True), (x.shape, None, None)
    stride = k if stride is None else stride
    return _windows(x, k, stride, 0, 0).mean(axis=2), (x.shape, k, stride)


def avgpool_backward(cache, grad_y):
    x_shape, k, stride = cache
    if k is None:
        H, W = x_shape[2:]
        if grad_y.shape != (*x_shape[:2], 1, 1):
            raise ValueError("grad_y shape mismatch")
        return np.broadcast_to(grad_y / (H * W), x_shape).copy()
    dwin = np.repeat(grad_y[:, :, None] / (k * k), k * k, axis=2)
    return _unwindows(dwin, x_shape, k, stride, 0)


# fully connected + loss -------------------------------------------------------

def fc_forward(x, weight, bias=None):
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"fc with weight {weight.shape} got input {x.shape}")
    y = x @ weight.T
    if bias is not None:
        y = y + bias
    return y


def fc_backward(x, weight, grad_y):
    if grad_y.shape != (x.shape[0], weight.shape[0]):
        raise ValueError("grad_y shape mismatch")
    return grad_y @ weight, grad_y.T @ x, grad_y.sum(axis=0)


def softmax_cross_entropy(logits: np.ndarray, labels) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient ``(softmax - onehot) / batch``."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError("need one label per row")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return float(loss), grad / n


# optimizer --------------------------------------------------------------------

@dataclass
class SgdState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 5e-3
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: SgdState):
    """In-place SGD: ``v = mu*v + (g + wd*p)``; ``p -= lr*v``."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, param {p.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p)
        v *= state.momentum
        v += g + state.weight_decay * p
        p -= state.lr * v
    return params
