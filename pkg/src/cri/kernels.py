"""Backend selection for the hot kernels.

The compiled extension ``cri._ckernels`` is used when it imports; otherwise
the numpy implementations in ``cri._kernels_py`` are used. Setting the
environment variable ``CRI_PURE_PYTHON=1`` forces the fallback.

Kernels
-------
splat_forward(geom, bias, h, w) -> (h, w, 3)
    Pre-activation image: ``bias + sum_l amp_l * color_l * G_l(x, y)``.
splat_backward(geom, dpre) -> (dgeom, dbias)
    Vector-Jacobian product of ``splat_forward``.
conv3x3_forward(x, weight, bias) -> (h, w, c_out)
    Zero-padded "same" cross-correlation, ``weight`` shaped (3, 3, c_in, c_out).
conv3x3_backward_input(dy, weight) -> (h, w, c_in)
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("CRI_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build
        _impl = _kernels_py


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def splat_forward(geom, bias, h, w):
    return _impl.splat_forward(_c(geom), _c(bias), int(h), int(w))


def splat_backward(geom, dpre):
    return _impl.splat_backward(_c(geom), _c(dpre))


def conv3x3_forward(x, weight, bias):
    return _impl.conv3x3_forward(_c(x), _c(weight), _c(bias))


def conv3x3_backward_input(dy, weight):
    return _impl.conv3x3_backward_input(_c(dy), _c(weight))
