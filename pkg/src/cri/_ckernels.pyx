# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled blob-splatting and 3x3 convolution kernels."""
import numpy as np
from libc.math cimport exp
from scipy.linalg.cython_blas cimport dgemm


def splat_forward(const double[:, ::1] geom, const double[::1] bias, Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t n = geom.shape[0]
    out_arr = np.empty((h, w, 3))
    cdef double[:, :, ::1] out = out_arr
    cdef double[::1] gy = np.empty(h)
    cdef double[::1] gx = np.empty(w)
    cdef Py_ssize_t l, y, x
    cdef double inv, d, wr, wg, wb, g
    for y in range(h):
        for x in range(w):
            out[y, x, 0] = bias[0]
            out[y, x, 1] = bias[1]
            out[y, x, 2] = bias[2]
    for l in range(n):
        inv = 1.0 / (2.0 * geom[l, 2] * geom[l, 2])
        for y in range(h):
            d = (y + 0.5) / h - geom[l, 1]
            gy[y] = exp(-d * d * inv)
        for x in range(w):
            d = (x + 0.5) / w - geom[l, 0]
            gx[x] = exp(-d * d * inv)
        wr = geom[l, 6] * geom[l, 3]
        wg = geom[l, 6] * geom[l, 4]
        wb = geom[l, 6] * geom[l, 5]
        for y in range(h):
            for x in range(w):
                g = gy[y] * gx[x]
                out[y, x, 0] += wr * g
                out[y, x, 1] += wg * g
                out[y, x, 2] += wb * g
    return out_arr


def splat_backward(const double[:, ::1] geom, const double[:, :, ::1] dpre):
    cdef Py_ssize_t n = geom.shape[0]
    cdef Py_ssize_t h = dpre.shape[0]
    cdef Py_ssize_t w = dpre.shape[1]
    dgeom_arr = np.zeros((n, 7))
    dbias_arr = np.zeros(3)
    cdef double[:, ::1] dgeom = dgeom_arr
    cdef double[::1] dbias = dbias_arr
    cdef double[::1] gy = np.empty(h)
    cdef double[::1] gx = np.empty(w)
    cdef double[::1] dyv = np.empty(h)
    cdef double[::1] dxv = np.empty(w)
    cdef Py_ssize_t l, y, x
    cdef double inv, sig, amp, cr, cg, cb, g, q, s0, s1, s2, acx, acy, asg
    cdef double p0, p1, p2
    for y in range(h):
        for x in range(w):
            dbias[0] += dpre[y, x, 0]
            dbias[1] += dpre[y, x, 1]
            dbias[2] += dpre[y, x, 2]
    for l in range(n):
        sig = geom[l, 2]
        inv = 1.0 / (2.0 * sig * sig)
        amp = geom[l, 6]
        cr = geom[l, 3]
        cg = geom[l, 4]
        cb = geom[l, 5]
        for y in range(h):
            dyv[y] = (y + 0.5) / h - geom[l, 1]
            gy[y] = exp(-dyv[y] * dyv[y] * inv)
        for x in range(w):
            dxv[x] = (x + 0.5) / w - geom[l, 0]
            gx[x] = exp(-dxv[x] * dxv[x] * inv)
        s0 = 0.0
        s1 = 0.0
        s2 = 0.0
        acx = 0.0
        acy = 0.0
        asg = 0.0
        for y in range(h):
            for x in range(w):
                g = gy[y] * gx[x]
                p0 = dpre[y, x, 0]
                p1 = dpre[y, x, 1]
                p2 = dpre[y, x, 2]
                s0 += p0 * g
                s1 += p1 * g
                s2 += p2 * g
                q = amp * (p0 * cr + p1 * cg + p2 * cb) * g
                acx += q * dxv[x]
                acy += q * dyv[y]
                asg += q * (dxv[x] * dxv[x] + dyv[y] * dyv[y])
        dgeom[l, 0] = acx / (sig * sig)
        dgeom[l, 1] = acy / (sig * sig)
        dgeom[l, 2] = asg / (sig * sig * sig)
        dgeom[l, 3] = amp * s0
        dgeom[l, 4] = amp * s1
        dgeom[l, 5] = amp * s2
        dgeom[l, 6] = s0 * cr + s1 * cg + s2 * cb
    return dgeom_arr, dbias_arr


cdef void _gemm_acc(const double* a, Py_ssize_t lda, const double* b, Py_ssize_t ldb, bint b_trans,
                    double* c, Py_ssize_t m, Py_ssize_t k, Py_ssize_t n) noexcept nogil:
    """Row-major ``C[m, n] += A[m, k] @ op(B)`` with ``op(B) = B`` or ``B.T``.

    BLAS is column-major, so this computes ``C.T += op(B).T @ A.T``.
    """
    cdef char tb = b'T' if b_trans else b'N'
    cdef char ta = b'N'
    cdef int mi = <int>m, ki = <int>k, ni = <int>n
    cdef int lda_ = <int>lda, ldb_ = <int>ldb, ldc = <int>n
    cdef double one = 1.0
    dgemm(&tb, &ta, &ni, &mi, &ki, &one, <double*>b, &ldb_, <double*>a, &lda_, &one, c, &ldc)


def conv3x3_forward(const double[:, :, ::1] x, const double[:, :, :, ::1] weight, const double[::1] bias):
    # Padded input and output are stored with row stride (w + 2); in that flat
    # layout each tap is one shifted matrix product over all pixels at once,
    # and the two wrap-around columns of every output row are discarded.
    cdef Py_ssize_t h = x.shape[0]
    cdef Py_ssize_t w = x.shape[1]
    cdef Py_ssize_t ci = x.shape[2]
    cdef Py_ssize_t co = weight.shape[3]
    cdef Py_ssize_t wp = w + 2
    cdef Py_ssize_t rows = (h - 1) * wp + w
    xp_arr = np.zeros((h + 2, wp, ci))
    xp_arr[1:h + 1, 1:w + 1] = x
    outp_arr = np.empty((h, wp, co))
    outp_arr[...] = bias
    cdef double[:, :, ::1] xp = xp_arr
    cdef double[:, :, ::1] outp = outp_arr
    cdef Py_ssize_t di, dj
    with nogil:
        for di in range(3):
            for dj in range(3):
                _gemm_acc(&xp[di, dj, 0], ci, &weight[di, dj, 0, 0], co, False,
                          &outp[0, 0, 0], rows, ci, co)
    return outp_arr[:, :w].copy()


def conv3x3_backward_input(const double[:, :, ::1] dy, const double[:, :, :, ::1] weight):
    cdef Py_ssize_t h = dy.shape[0]
    cdef Py_ssize_t w = dy.shape[1]
    cdef Py_ssize_t ci = weight.shape[2]
    cdef Py_ssize_t co = weight.shape[3]
    cdef Py_ssize_t wp = w + 2
    cdef Py_ssize_t rows = (h - 1) * wp + w
    dyp_arr = np.zeros((h + 2, wp, co))
    dyp_arr[1:h + 1, 1:w + 1] = dy
    dxp_arr = np.zeros((h, wp, ci))
    cdef double[:, :, ::1] dyp = dyp_arr
    cdef double[:, :, ::1] dxp = dxp_arr
    cdef Py_ssize_t di, dj
    with nogil:
        for di in range(3):
            for dj in range(3):
                _gemm_acc(&dyp[2 - di, 2 - dj, 0], co, &weight[di, dj, 0, 0], co, True,
                          &dxp[0, 0, 0], rows, co, ci)
    return dxp_arr[:, :w].copy()
