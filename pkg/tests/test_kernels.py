"""numba and numpy paths of the interpolation kernels agree."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from onedconv import _kernels, nn
from onedconv.onedconv import ShapeConvWeights, onedconv_backward, onedconv_forward

pytestmark = pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba not importable")


@pytest.fixture
def backend_restore():
    before = _kernels.backend()
    yield
    _kernels.set_backend(before)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 3), st.integers(1, 4), st.integers(1, 40))
def test_kernel_parity(seed, b, c, m):
    r = np.random.default_rng(seed)
    length = int(r.integers(1, 30))
    xflat = r.standard_normal((b, c, length))
    pos = r.uniform(-3, length + 3, (b, m))
    lo = np.floor(pos).astype(np.int64)
    frac = pos - lo
    dcols = r.standard_normal((b, c, m))
    np.testing.assert_allclose(_kernels.gather_numba(xflat, lo, frac),
                               _kernels.gather_numpy(xflat, lo, frac), atol=1e-12)
    np.testing.assert_allclose(_kernels.scatter_numba(dcols, lo, frac, length),
                               _kernels.scatter_numpy(dcols, lo, frac, length), atol=1e-12)
    np.testing.assert_allclose(_kernels.slope_numba(xflat, lo, dcols),
                               _kernels.slope_numpy(xflat, lo, dcols), atol=1e-12)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_operator_parity(rng, backend_restore, dtype):
    spec = nn.ConvSpec(3, 4, 3, 2)
    x = rng.standard_normal((2, 3, 9, 9)).astype(dtype)
    w = nn.ConvWeights(rng.standard_normal((4, 3, 3, 3)).astype(dtype), rng.standard_normal(4).astype(dtype))
    sw = ShapeConvWeights(rng.standard_normal((2, 3, 3, 3)).astype(dtype), rng.standard_normal(2).astype(dtype))
    out = {}
    for name in ("numba", "numpy"):
        _kernels.set_backend(name)
        y, cache = onedconv_forward(x, spec, w, sw)
        out[name] = (y, *onedconv_backward(cache, np.ones_like(y)))
    tol = 1e-4 if dtype == np.float32 else 1e-11
    for a, b in zip(out["numba"], out["numpy"]):
        np.testing.assert_allclose(a, b, rtol=tol, atol=tol)
        assert a.dtype == dtype


def test_unknown_backend():
    with pytest.raises(ValueError):
        _kernels.set_backend("cuda")
