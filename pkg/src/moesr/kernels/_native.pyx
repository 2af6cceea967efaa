# Compiled conv2d kernels: im2col gather, BLAS dgemm contraction, col2im
# scatter.  Same contracts as kernels._numpy; float64 only.

import numpy as np

cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef void _gemm_rm(double* a, double* b, double* c,
                   int m, int n, int k, bint ta, bint tb) noexcept nogil:
    # Row-major C[m,n] = op(A)[m,k] @ op(B)[k,n] via the column-major
    # identity C^T = op(B)^T op(A)^T.
    cdef char fa = b'T' if tb else b'N'
    cdef char fb = b'T' if ta else b'N'
    cdef double one = 1.0, zero = 0.0
    cdef int lda = k if tb else n      # storage columns of B
    cdef int ldb = m if ta else k      # storage columns of A
    cdef int ldc = n
    dgemm(&fa, &fb, &n, &m, &k, &one, b, &lda, a, &ldb, &zero, c, &ldc)


cdef void _im2col(double[:, :, :, ::1] x, double[:, ::1] col,
                  int k, int stride, int pad, int dil,
                  int ho, int wo) noexcept nogil:
    cdef int nb = x.shape[0], ci = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef int b, oy, ox, c, i, j, iy, ix, row, base
    for b in range(nb):
        for oy in range(ho):
            for ox in range(wo):
                row = (b * ho + oy) * wo + ox
                for c in range(ci):
                    base = c * k * k
                    for i in range(k):
                        iy = oy * stride + i * dil - pad
                        for j in range(k):
                            ix = ox * stride + j * dil - pad
                            if 0 <= iy < h and 0 <= ix < w:
                                col[row, base + i * k + j] = x[b, c, iy, ix]
                            else:
                                col[row, base + i * k + j] = 0.0


cdef void _col2im(double[:, ::1] col, double[:, :, :, ::1] gx,
                  int k, int stride, int pad, int dil,
                  int ho, int wo) noexcept nogil:
    cdef int nb = gx.shape[0], ci = gx.shape[1], h = gx.shape[2], w = gx.shape[3]
    cdef int b, oy, ox, c, i, j, iy, ix, row, base
    for b in range(nb):
        for oy in range(ho):
            for ox in range(wo):
                row = (b * ho + oy) * wo + ox
                for c in range(ci):
                    base = c * k * k
                    for i in range(k):
                        iy = oy * stride + i * dil - pad
                        if iy < 0 or iy >= h:
                            continue
                        for j in range(k):
                            ix = ox * stride + j * dil - pad
                            if 0 <= ix < w:
                                gx[b, c, iy, ix] += col[row, base + i * k + j]


cdef void _nchw_to_mat(double[:, :, :, ::1] y, double[:, ::1] mat) noexcept nogil:
    cdef int nb = y.shape[0], co = y.shape[1], ho = y.shape[2], wo = y.shape[3]
    cdef int b, c, oy, ox
    for b in range(nb):
        for c in range(co):
            for oy in range(ho):
                for ox in range(wo):
                    mat[(b * ho + oy) * wo + ox, c] = y[b, c, oy, ox]


cdef void _mat_to_nchw(double[:, ::1] mat, double[:, :, :, ::1] y) noexcept nogil:
    cdef int nb = y.shape[0], co = y.shape[1], ho = y.shape[2], wo = y.shape[3]
    cdef int b, c, oy, ox
    for b in range(nb):
        for c in range(co):
            for oy in range(ho):
                for ox in range(wo):
                    y[b, c, oy, ox] = mat[(b * ho + oy) * wo + ox, c]


def _out_size(int n, int k, int stride, int pad, int dil):
    return (n + 2 * pad - (dil * (k - 1) + 1)) // stride + 1


def conv2d_forward(x, w, int stride=1, int pad=0, int dil=1):
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, :, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef int nb = xv.shape[0], ci = xv.shape[1]
    cdef int co = wv.shape[0], k = wv.shape[2]
    cdef int ho = _out_size(xv.shape[2], k, stride, pad, dil)
    cdef int wo = _out_size(xv.shape[3], k, stride, pad, dil)
    col_np = np.empty((nb * ho * wo, ci * k * k), dtype=np.float64)
    ymat_np = np.empty((nb * ho * wo, co), dtype=np.float64)
    y_np = np.empty((nb, co, ho, wo), dtype=np.float64)
    cdef double[:, ::1] col = col_np, ymat = ymat_np
    cdef double[:, :, :, ::1] yv = y_np
    cdef double[:, ::1] wmat = np.ascontiguousarray(w, dtype=np.float64).reshape(co, ci * k * k)
    with nogil:
        _im2col(xv, col, k, stride, pad, dil, ho, wo)
        _gemm_rm(&col[0, 0], &wmat[0, 0], &ymat[0, 0],
                 nb * ho * wo, co, ci * k * k, False, True)
        _mat_to_nchw(ymat, yv)
    return y_np


def conv2d_grad_weight(x, gy, int stride=1, int pad=0, int dil=1, k=None):
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, :, :, ::1] gyv = np.ascontiguousarray(gy, dtype=np.float64)
    cdef int kk = int(k)
    cdef int nb = xv.shape[0], ci = xv.shape[1]
    cdef int co = gyv.shape[1], ho = gyv.shape[2], wo = gyv.shape[3]
    col_np = np.empty((nb * ho * wo, ci * kk * kk), dtype=np.float64)
    gymat_np = np.empty((nb * ho * wo, co), dtype=np.float64)
    gw_np = np.empty((co, ci, kk, kk), dtype=np.float64)
    cdef double[:, ::1] col = col_np, gymat = gymat_np
    cdef double[:, ::1] gwmat = gw_np.reshape(co, ci * kk * kk)
    with nogil:
        _im2col(xv, col, kk, stride, pad, dil, ho, wo)
        _nchw_to_mat(gyv, gymat)
        _gemm_rm(&gymat[0, 0], &col[0, 0], &gwmat[0, 0],
                 co, ci * kk * kk, nb * ho * wo, True, False)
    return gw_np


def conv2d_grad_input(gy, w, int stride=1, int pad=0, int dil=1,
                      in_h=None, in_w=None):
    cdef double[:, :, :, ::1] gyv = np.ascontiguousarray(gy, dtype=np.float64)
    cdef double[:, :, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef int nb = gyv.shape[0], co = gyv.shape[1]
    cdef int ho = gyv.shape[2], wo = gyv.shape[3]
    cdef int ci = wv.shape[1], k = wv.shape[2]
    cdef int h = int(in_h), wdim = int(in_w)
    gymat_np = np.empty((nb * ho * wo, co), dtype=np.float64)
    colg_np = np.empty((nb * ho * wo, ci * k * k), dtype=np.float64)
    gx_np = np.zeros((nb, ci, h, wdim), dtype=np.float64)
    cdef double[:, ::1] gymat = gymat_np, colg = colg_np
    cdef double[:, :, :, ::1] gxv = gx_np
    cdef double[:, ::1] wmat = np.ascontiguousarray(w, dtype=np.float64).reshape(co, ci * k * k)
    with nogil:
        _nchw_to_mat(gyv, gymat)
        _gemm_rm(&gymat[0, 0], &wmat[0, 0], &colg[0, 0],
                 nb * ho * wo, ci * k * k, co, False, False)
        _col2im(colg, gxv, k, stride, pad, dil, ho, wo)
    return gx_np
