"""Time the numba and numpy backends on the interpolation kernels and one full layer.

    python benchmarks/bench_kernels.py [--batch 32] [--repeat 20]

Shapes mimic the first tiny-cnn layer on 32x32 digits (16 filters) and the
second (16 -> 32 channels on 16x16).
"""
import argparse
import time

import numpy as np

from onedconv import _kernels, nn
from onedconv.onedconv import ShapeConvWeights, onedconv_backward, onedconv_forward


def best_of(fn, repeat):
    fn()  # warm-up (and numba compilation)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def kernel_cases(batch, rng):
    for c, hw in ((1, 32), (16, 16)):
        length = (hw + 2) ** 2
        m = 9 * hw * hw
        xflat = rng.standard_normal((batch, c, length)).astype(np.float32)
        pos = rng.uniform(0, length - 1, (batch, m)).astype(np.float32)
        lo = np.floor(pos).astype(np.int64)
        frac = pos - lo
        dcols = rng.standard_normal((batch, c, m)).astype(np.float32)
        tag = f"C={c:<2d} {hw}x{hw}"
        yield f"gather  {tag}", lambda: _kernels.gather(xflat, lo, frac)
        yield f"scatter {tag}", lambda: _kernels.scatter(dcols, lo, frac, length)
        yield f"slope   {tag}", lambda: _kernels.slope(xflat, lo, dcols)


def layer_case(batch, rng):
    spec = nn.ConvSpec(16, 32, 3, 1)
    x = rng.standard_normal((batch, 16, 16, 16)).astype(np.float32)
    w = nn.ConvWeights(rng.standard_normal((32, 16, 3, 3)).astype(np.float32),
                       np.zeros(32, np.float32))
    sw = ShapeConvWeights(rng.uniform(-0.05, 0.05, (2, 16, 3, 3)).astype(np.float32),
                          np.full(2, 0.3, np.float32))

    def step():
        y, cache = onedconv_forward(x, spec, w, sw)
        onedconv_backward(cache, np.ones_like(y))
    return "layer fwd+bwd 16->32 16x16", step


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--repeat", type=int, default=20)
    args = p.parse_args()
    if not _kernels.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)
    cases = list(kernel_cases(args.batch, rng)) + [layer_case(args.batch, rng)]
    print(f"{'case':<30s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    before = _kernels.backend()
    try:
        for name, fn in cases:
            t = {}
            for backend in ("numba", "numpy"):
                _kernels.set_backend(backend)
                t[backend] = best_of(fn, args.repeat) * 1e3
            print(f"{name:<30s} {t['numba']:>10.3f} {t['numpy']:>10.3f} {t['numpy'] / t['numba']:>7.1f}x")
    finally:
        _kernels.set_backend(before)


if __name__ == "__main__":
    main()
