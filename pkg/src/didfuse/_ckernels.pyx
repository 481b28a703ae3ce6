# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled conv1d kernels: im2col into a scratch buffer, then one dgemm."""

import numpy as np
cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef void _im2col(const double[:, ::1] x, double[:, ::1] cols,
                  Py_ssize_t k, Py_ssize_t stride) noexcept nogil:
    cdef Py_ssize_t t, c, j, cin = x.shape[1], tout = cols.shape[0]
    cdef Py_ssize_t base
    for t in range(tout):
        base = t * stride
        for c in range(cin):
            for j in range(k):
                cols[t, c * k + j] = x[base + j, c]


def conv1d_forward(const double[:, ::1] x, const double[:, :, ::1] w,
                   const double[::1] b, Py_ssize_t stride):
    """Valid 1-D convolution; returns (y[T'xCout], cols[T'xCin*K])."""
    cdef Py_ssize_t t_in = x.shape[0], cin = x.shape[1]
    cdef Py_ssize_t cout = w.shape[0], k = w.shape[2]
    if w.shape[1] != cin:
        raise ValueError(f"kernel expects {w.shape[1]} input channels, got {cin}")
    if t_in < k:
        raise ValueError(f"input has {t_in} frames, kernel width is {k}")
    cdef Py_ssize_t tout = (t_in - k) // stride + 1
    cdef Py_ssize_t ck = cin * k
    cols_arr = np.empty((tout, ck), dtype=np.float64)
    y_arr = np.empty((tout, cout), dtype=np.float64)
    cdef double[:, ::1] cols = cols_arr
    cdef double[:, ::1] y = y_arr
    cdef Py_ssize_t t, o
    cdef int m_ = <int>cout, n_ = <int>tout, k_ = <int>ck
    cdef double one = 1.0, zero = 0.0
    with nogil:
        _im2col(x, cols, k, stride)
        for t in range(tout):
            for o in range(cout):
                y[t, o] = b[o]
        # column-major view: y^T (cout x tout) = W (cout x ck) @ cols^T (ck x tout)
        dgemm(b"T", b"N", &m_, &n_, &k_, &one, <double*>&w[0, 0, 0], &k_,
              &cols[0, 0], &k_, &one, &y[0, 0], &m_)
    return y_arr, cols_arr


def conv1d_backward(const double[:, ::1] dy, const double[:, ::1] cols,
                    const double[:, :, ::1] w, Py_ssize_t t_in, Py_ssize_t stride):
    """Gradients (dx, dw, db) of a valid conv1d given the forward im2col buffer."""
    cdef Py_ssize_t tout = dy.shape[0], cout = dy.shape[1]
    cdef Py_ssize_t cin = w.shape[1], k = w.shape[2], ck = cin * k
    dx_arr = np.zeros((t_in, cin), dtype=np.float64)
    dw_arr = np.empty((cout, cin, k), dtype=np.float64)
    db_arr = np.zeros(cout, dtype=np.float64)
    dcols_arr = np.empty((tout, ck), dtype=np.float64)
    cdef double[:, ::1] dx = dx_arr
    cdef double[:, :, ::1] dw = dw_arr
    cdef double[::1] db = db_arr
    cdef double[:, ::1] dcols = dcols_arr
    cdef Py_ssize_t t, o, c, j, base
    cdef int cout_ = <int>cout, tout_ = <int>tout, ck_ = <int>ck
    cdef double one = 1.0, zero = 0.0
    with nogil:
        for t in range(tout):
            for o in range(cout):
                db[o] += dy[t, o]
        # dW (cout x ck, row-major) -> column-major (ck x cout) = cols^T @ dy
        dgemm(b"N", b"T", &ck_, &cout_, &tout_, &one, <double*>&cols[0, 0], &ck_,
              <double*>&dy[0, 0], &cout_, &zero, &dw[0, 0, 0], &ck_)
        # dcols (tout x ck, row-major) -> column-major (ck x tout) = W^T @ dy^T
        dgemm(b"N", b"N", &ck_, &tout_, &cout_, &one, <double*>&w[0, 0, 0], &ck_,
              <double*>&dy[0, 0], &cout_, &zero, &dcols[0, 0], &ck_)
        for t in range(tout):
            base = t * stride
            for c in range(cin):
                for j in range(k):
                    dx[base + j, c] += dcols[t, c * k + j]
    return dx_arr, dw_arr, db_arr
