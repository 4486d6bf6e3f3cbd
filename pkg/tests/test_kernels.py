import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import gleasonkit._kernels as K
from gleasonkit._kernels import _fallback

try:
    from gleasonkit._kernels import _ckernels
except ImportError:  # extension not built
    _ckernels = None

needs_c = pytest.mark.skipif(_ckernels is None, reason="compiled kernels not built")


def test_dispatch_reports_backend():
    assert K.BACKEND in ("cython", "python")
    if _ckernels is not None and os.environ.get("GLEASONKIT_PURE_PYTHON") != "1":
        assert K.BACKEND == "cython"


def test_env_forces_fallback():
    code = "import gleasonkit._kernels as k; print(k.BACKEND)"
    env = dict(os.environ, GLEASONKIT_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def _cox_inputs(seed, n, p, tie_levels):
    rng = np.random.default_rng(seed)
    t = np.sort(rng.integers(1, tie_levels + 1, n).astype(float) if tie_levels else rng.exponential(1.0, n))
    e = (rng.random(n) < 0.7).astype(np.int64)
    X = rng.normal(size=(n, p))
    eta = X @ rng.normal(0, 0.5, p)
    return t, e, X, eta


@needs_c
@given(st.integers(0, 2**32 - 1), st.integers(1, 60), st.integers(0, 4), st.sampled_from([0, 3, 10]),
       st.booleans())
def test_cox_accumulate_backends_agree(seed, n, p, ties, efron):
    t, e, X, eta = _cox_inputs(seed, n, p, ties)
    a = _fallback.cox_accumulate(t, e, X, eta, efron)
    b = _ckernels.cox_accumulate(t, e, X, eta, efron)
    assert a[0] == pytest.approx(b[0], rel=1e-12, abs=1e-12)
    np.testing.assert_allclose(a[1], b[1], rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(a[2], b[2], rtol=1e-12, atol=1e-12)


@needs_c
@given(st.integers(0, 2**32 - 1))
def test_rect_polygon_backends_agree(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(3, 10))
    ang = np.sort(rng.uniform(0, 2 * np.pi, k))
    rad = rng.uniform(5, 40, k)
    px, py = 50 + rad * np.cos(ang), 50 + rad * np.sin(ang)
    if rng.random() < 0.3:  # integer vertices and rects make boundary contact common
        px, py = np.round(px), np.round(py)
    xy = rng.integers(-10, 100, (200, 2)).astype(float)
    size = rng.integers(1, 30, (200, 1)).astype(float)
    rects = np.hstack([xy, xy + size])
    assert np.array_equal(_fallback.rects_intersect_polygon(rects, px, py),
                          _ckernels.rects_intersect_polygon(rects, px, py))


def test_kernel_edge_cases():
    for mod in filter(None, (_fallback, _ckernels)):
        ll, g, h = mod.cox_accumulate(np.zeros(0), np.zeros(0, np.int64), np.zeros((0, 2)), np.zeros(0), True)
        assert ll == 0.0 and g.shape == (2,) and h.shape == (2, 2)
        sq_x, sq_y = np.array([0.0, 10, 10, 0]), np.array([0.0, 0, 10, 10])
        rects = np.array([[2, 2, 3, 3], [10, 10, 12, 12], [11, 0, 12, 1], [-5, -5, 20, 20]], float)
        assert mod.rects_intersect_polygon(rects, sq_x, sq_y).tolist() == [True, True, False, True]
        assert mod.rects_intersect_polygon(np.zeros((0, 4)), sq_x, sq_y).shape == (0,)
