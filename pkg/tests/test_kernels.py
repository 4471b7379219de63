"""Compiled and numpy kernels against each other and against loop oracles."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cri import _kernels_py, kernels

try:
    from cri import _ckernels
except ImportError:  # pragma: no cover
    _ckernels = None

needs_ext = pytest.mark.skipif(_ckernels is None, reason="compiled extension not built")


def random_geom(rng, n):
    return np.column_stack([rng.uniform(0, 1, (n, 2)), rng.uniform(0.05, 0.3, n),
                            rng.uniform(0, 1, (n, 3)), rng.normal(0, 3, n)])


def splat_oracle(geom, bias, h, w):
    out = np.zeros((h, w, 3)) + bias
    for y in range(h):
        for x in range(w):
            py, px = (y + 0.5) / h, (x + 0.5) / w
            for cx, cy, s, r, g, b, a in geom:
                gval = np.exp(-((px - cx) ** 2 + (py - cy) ** 2) / (2 * s * s))
                out[y, x] += a * np.array([r, g, b]) * gval
    return out


def conv_oracle(x, wt, b):
    h, w, _ = x.shape
    out = np.zeros((h, w, wt.shape[3])) + b
    for i in range(h):
        for j in range(w):
            for di in range(3):
                for dj in range(3):
                    yy, xx = i + di - 1, j + dj - 1
                    if 0 <= yy < h and 0 <= xx < w:
                        out[i, j] += x[yy, xx] @ wt[di, dj]
    return out


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")


def test_splat_matches_loop_oracle(rng):
    geom, bias = random_geom(rng, 3), rng.normal(size=3)
    np.testing.assert_allclose(kernels.splat_forward(geom, bias, 6, 5), splat_oracle(geom, bias, 6, 5),
                               rtol=1e-12, atol=1e-12)


def test_conv_matches_loop_oracle(rng):
    x, wt, b = rng.normal(size=(5, 6, 2)), rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)
    np.testing.assert_allclose(kernels.conv3x3_forward(x, wt, b), conv_oracle(x, wt, b), rtol=1e-12, atol=1e-12)


def test_conv_backward_is_adjoint(rng):
    x, wt = rng.normal(size=(7, 4, 3)), rng.normal(size=(3, 3, 3, 5))
    dy = rng.normal(size=(7, 4, 5))
    lhs = np.sum(kernels.conv3x3_forward(x, wt, np.zeros(5)) * dy)
    rhs = np.sum(x * kernels.conv3x3_backward_input(dy, wt))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_splat_backward_finite_difference(rng):
    geom, bias = random_geom(rng, 4), rng.normal(size=3)
    v = rng.normal(size=(9, 9, 3))
    dgeom, dbias = kernels.splat_backward(geom, v)
    f = lambda g: np.sum(kernels.splat_forward(g, bias, 9, 9) * v)  # noqa: E731
    for idx in range(geom.size):
        gp, gm = geom.copy(), geom.copy()
        gp.flat[idx] += 1e-6
        gm.flat[idx] -= 1e-6
        num = (f(gp) - f(gm)) / 2e-6
        assert dgeom.flat[idx] == pytest.approx(num, rel=1e-5, abs=1e-7)
    np.testing.assert_allclose(dbias, v.sum(axis=(0, 1)))


@needs_ext
@settings(max_examples=25, deadline=None)
@given(st.integers(1, 7), st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_splat_backends_agree(n, h, w, seed):
    rng = np.random.default_rng(seed)
    geom, bias, dpre = random_geom(rng, n), rng.normal(size=3), rng.normal(size=(h, w, 3))
    np.testing.assert_allclose(_ckernels.splat_forward(geom, bias, h, w), _kernels_py.splat_forward(geom, bias, h, w),
                               rtol=1e-12, atol=1e-12)
    for a, b in zip(_ckernels.splat_backward(geom, dpre), _kernels_py.splat_backward(geom, dpre)):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-10)


@needs_ext
@settings(max_examples=25, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_conv_backends_agree(h, w, ci, co, seed):
    rng = np.random.default_rng(seed)
    x, wt, b = rng.normal(size=(h, w, ci)), rng.normal(size=(3, 3, ci, co)), rng.normal(size=co)
    dy = rng.normal(size=(h, w, co))
    np.testing.assert_allclose(_ckernels.conv3x3_forward(x, wt, b), _kernels_py.conv3x3_forward(x, wt, b),
                               rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(_ckernels.conv3x3_backward_input(dy, wt), _kernels_py.conv3x3_backward_input(dy, wt),
                               rtol=1e-12, atol=1e-12)


def test_pure_python_env_switch():
    import os
    import subprocess
    import sys

    code = "from cri import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, CRI_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
