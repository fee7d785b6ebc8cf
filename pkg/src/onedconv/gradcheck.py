"""Central finite-difference checks for every backward pass in the package.

The numeric side only ever calls forward functions. A case's scalar objective
is ``sum(forward(params) * R)`` with a random projection ``R``, so the analytic
side is simply ``backward(params, R)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List

import numpy as np

from . import nn
from .onedconv import ShapeConvWeights, onedconv_backward, onedconv_forward

EPS = 1e-5
FRACTION_SHIFT = 0.3


def finite_diff(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``, one coordinate at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if x.dtype != np.float64:
        raise TypeError("finite differences need float64 inputs")
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.empty_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"objective is not finite at coordinate {i}")
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def rel_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


@dataclass
class GroupReport:
    name: str
    max_rel: float
    max_abs: float
    count: int


@dataclass
class GradReport:
    op: str
    seed: int
    tol: float
    groups: List[GroupReport] = field(default_factory=list)

    @property
    def max_rel(self) -> float:
        return max((g.max_rel for g in self.groups), default=0.0)

    @property
    def passed(self) -> bool:
        return bool(self.groups) and self.max_rel < self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.op:<14s} seed={self.seed:<3d} max_rel={self.max_rel:.3e} tol={self.tol:.0e} {status}"


@dataclass
class GradCase:
    """One operation under test.

    ``make(rng)`` returns the parameter groups, ``forward(params)`` the output
    array and ``backward(params, grad_out)`` a dict of analytic gradients keyed
    like ``params``. ``tol`` is the default pass threshold.
    """
    name: str
    make: Callable[[np.random.Generator], Dict[str, np.ndarray]]
    forward: Callable[[Dict[str, np.ndarray]], np.ndarray]
    backward: Callable[[Dict[str, np.ndarray], np.ndarray], Dict[str, np.ndarray]]
    tol: float = 1e-4


def check(case: GradCase, seed: int = 0, tol: float = None, eps: float = EPS) -> GradReport:
    """Compare analytic and numeric gradients for every parameter group."""
    tol = case.tol if tol is None else tol
    rng = np.random.default_rng(seed)
    params = case.make(rng)
    out = np.asarray(case.forward(params))
    proj = rng.standard_normal(out.shape)
    analytic = case.backward(params, proj)
    report = GradReport(case.name, seed, tol)
    for name, value in params.items():
        def objective(v, name=name):
            trial = dict(params)
            trial[name] = v
            return float(np.sum(np.asarray(case.forward(trial)) * proj))

        numeric = finite_diff(objective, value, eps)
        a = np.asarray(analytic[name], dtype=np.float64)
        report.groups.append(GroupReport(
            name, float(rel_error(a, numeric).max()), float(np.abs(a - numeric).max()), numeric.size))
    return report


# built-in cases ---------------------------------------------------------------

def _conv_case() -> GradCase:
    spec = nn.ConvSpec(2, 3, 3, 1)

    def make(rng):
        return {"x": rng.standard_normal((1, 2, 5, 5)),
                "kernel": rng.standard_normal((3, 2, 3, 3)),
                "bias": rng.standard_normal(3)}

    def fwd(p):
        return nn.conv2d_forward(p["x"], spec, nn.ConvWeights(p["kernel"], p["bias"]))

    def bwd(p, g):
        dx, dk, db = nn.conv2d_backward(p["x"], spec, nn.ConvWeights(p["kernel"], p["bias"]), g)
        return {"x": dx, "kernel": dk, "bias": db}

    return GradCase("conv2d", make, fwd, bwd, tol=1e-6)


def _fc_case() -> GradCase:
    def make(rng):
        return {"x": rng.standard_normal((4, 6)), "weight": rng.standard_normal((5, 6)),
                "bias": rng.standard_normal(5)}

    def bwd(p, g):
        dx, dw, db = nn.fc_backward(p["x"], p["weight"], g)
        return {"x": dx, "weight": dw, "bias": db}

    return GradCase("fc", make, lambda p: nn.fc_forward(p["x"], p["weight"], p["bias"]), bwd,
                    tol=1e-6)


def _bn_case() -> GradCase:
    def make(rng):
        return {"x": rng.standard_normal((4, 3, 3, 3)) * 2 + 0.5,
                "gamma": rng.uniform(0.5, 1.5, 3), "beta": rng.standard_normal(3)}

    def fwd(p):
        return nn.batchnorm_forward(p["x"], p["gamma"], p["beta"], None, None, train=True)[0]

    def bwd(p, g):
        _, cache = nn.batchnorm_forward(p["x"], p["gamma"], p["beta"], None, None, train=True)
        dx, dg, db = nn.batchnorm_backward(cache, g)
        return {"x": dx, "gamma": dg, "beta": db}

    return GradCase("batchnorm", make, fwd, bwd)


def _ce_case() -> GradCase:
    labels = np.array([3, 0, 9, 5])

    def make(rng):
        return {"logits": rng.standard_normal((4, 10))}

    def bwd(p, g):
        return {"logits": nn.softmax_cross_entropy(p["logits"], labels)[1] * float(g)}

    return GradCase("softmax_ce", make,
                    lambda p: np.asarray(nn.softmax_cross_entropy(p["logits"], labels)[0]), bwd)


def _maxpool_case() -> GradCase:
    def make(rng):
        # distinct values keep the argmax away from ties
        return {"x": rng.permutation(64).reshape(1, 1, 8, 8) * 0.1 + rng.uniform(0, 0.01, (1, 1, 8, 8))}

    def bwd(p, g):
        _, cache = nn.maxpool_forward(p["x"], 2)
        return {"x": nn.maxpool_backward(cache, g)}

    return GradCase("maxpool", make, lambda p: nn.maxpool_forward(p["x"], 2)[0], bwd, tol=1e-6)


def _avgpool_case() -> GradCase:
    def make(rng):
        return {"x": rng.standard_normal((2, 3, 4, 4))}

    def bwd(p, g):
        _, cache = nn.avgpool_forward(p["x"], 2)
        return {"x": nn.avgpool_backward(cache, g)}

    return GradCase("avgpool", make, lambda p: nn.avgpool_forward(p["x"], 2)[0], bwd, tol=1e-6)


def onedconv_case(stride: int = 1, corrupt: bool = False) -> GradCase:
    """1x2x6x6 input, K=3, offsets pushed ``FRACTION_SHIFT`` off integer points.

    The shape conv is small (|kernel| <= 0.01) and its bias sits at 0.3, so every
    gap delta lies in about [0.07, 0.53] and no sample position is near a kink.
    ``corrupt`` doubles the kernel gradient (negative control).
    """
    spec = nn.ConvSpec(2, 3, 3, stride)

    def make(rng):
        return {"x": rng.uniform(-1, 1, (1, 2, 6, 6)),
                "kernel": rng.standard_normal((3, 2, 3, 3)),
                "bias": rng.standard_normal(3),
                "shape_kernel": rng.uniform(-0.01, 0.01, (2, 2, 3, 3)),
                "shape_bias": FRACTION_SHIFT + rng.uniform(-0.05, 0.05, 2)}

    def run(p):
        return onedconv_forward(p["x"], spec, nn.ConvWeights(p["kernel"], p["bias"]),
                                ShapeConvWeights(p["shape_kernel"], p["shape_bias"]))

    def bwd(p, g):
        grads = onedconv_backward(run(p)[1], g)
        out = dict(zip(("x", "kernel", "bias", "shape_kernel", "shape_bias"), grads))
        if corrupt:
            out["kernel"] = out["kernel"] * 2
        return out

    name = "onedconv" + ("_s2" if stride == 2 else "") + ("_corrupt" if corrupt else "")
    return GradCase(name, make, lambda p: run(p)[0], bwd)


def default_cases() -> List[GradCase]:
    return [_conv_case(), _fc_case(), _bn_case(), _ce_case(), _maxpool_case(),
            _avgpool_case(), onedconv_case(1), onedconv_case(2)]


def run_suite(seeds=range(20), cases=None) -> List[GradReport]:
    cases = default_cases() if cases is None else cases
    return [check(case, seed) for case in cases for seed in seeds]
