# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled SEM / SPA aggregation kernels.

Both functions take float64 C-contiguous arrays and mirror the numpy
versions in ``_kernels_py`` exactly (same conventions, same epsilon).
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

cdef double COS_EPS = 1e-8


cdef inline double _fmax(double a, double b) nogil:
    return a if a > b else b


def sem_aggregate(const double[:, :, ::1] tokens, const double[:, ::1] cls,
                  const double[:, ::1] mask, double alpha):
    cdef Py_ssize_t B = tokens.shape[0], L = tokens.shape[1], C = tokens.shape[2]
    out_arr = np.empty((B, L, C), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[::1] sim = np.empty(L, dtype=np.float64)
    # mixing matrix: row i holds alpha * (p_i * softmax_fg + (1 - p_i) * softmax_bg)
    cdef double[:, ::1] W = np.empty((L, L), dtype=np.float64)
    cdef double[::1] wbg = np.empty(L, dtype=np.float64)
    cdef Py_ssize_t b, i, j, c
    cdef double ncls, nx, dot, pi, pj, mfg, mbg, zfg, zbg, v
    cdef int m = <int>C, n = <int>L, k = <int>L, ldx = <int>C, ldw = <int>L
    cdef double one = 1.0
    if L == 0 or C == 0:
        return out_arr

    with nogil:
        for b in range(B):
            ncls = 0.0
            for c in range(C):
                ncls = ncls + cls[b, c] * cls[b, c]
            ncls = _fmax(sqrt(ncls), COS_EPS)
            for j in range(L):
                nx = 0.0
                dot = 0.0
                for c in range(C):
                    nx = nx + tokens[b, j, c] * tokens[b, j, c]
                    dot = dot + tokens[b, j, c] * cls[b, c]
                sim[j] = dot / (_fmax(sqrt(nx), COS_EPS) * ncls)

            for i in range(L):
                pi = mask[b, i]
                mfg = -1e300
                mbg = -1e300
                for j in range(L):
                    pj = mask[b, j]
                    W[i, j] = (1.0 - sim[j]) * pi * pj
                    wbg[j] = sim[j] * (1.0 - pi) * (1.0 - pj)
                    if W[i, j] > mfg:
                        mfg = W[i, j]
                    if wbg[j] > mbg:
                        mbg = wbg[j]
                zfg = 0.0
                zbg = 0.0
                for j in range(L):
                    W[i, j] = exp(W[i, j] - mfg)
                    wbg[j] = exp(wbg[j] - mbg)
                    zfg = zfg + W[i, j]
                    zbg = zbg + wbg[j]
                for j in range(L):
                    W[i, j] = alpha * (pi * W[i, j] / zfg + (1.0 - pi) * wbg[j] / zbg)
                for c in range(C):
                    out[b, i, c] = (1.0 - alpha) * tokens[b, i, c]

            # out += W @ X, row-major, issued as the column-major product X^T W^T
            dgemm("N", "N", &m, &n, &k, &one, <double*>&tokens[b, 0, 0], &ldx,
                  &W[0, 0], &ldw, &one, &out[b, 0, 0], &ldx)
    return out_arr


def spa_aggregate(const double[:, :, ::1] tokens, const double[:, ::1] cls,
                  const double[:, ::1] mask, Py_ssize_t side, Py_ssize_t kernel,
                  double eps):
    cdef Py_ssize_t B = tokens.shape[0], L = tokens.shape[1], C = tokens.shape[2]
    cdef Py_ssize_t half = kernel // 2
    cdef Py_ssize_t K = kernel * kernel
    out_arr = np.zeros((B, L, C), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[::1] norm = np.empty(L, dtype=np.float64)
    cdef double[::1] dotc = np.empty(L, dtype=np.float64)
    cdef double[::1] mu = np.empty(C, dtype=np.float64)
    cdef Py_ssize_t[::1] idx = np.empty(K, dtype=np.intp)
    cdef double[::1] sbg = np.empty(K, dtype=np.float64)
    cdef double[::1] rfg = np.empty(K, dtype=np.float64)
    cdef Py_ssize_t b, r, q, dr, dq, rr, qq, k, n, t, c
    cdef double ncls, nx, dot, p, pb, cosv, dev, d, mx_b, mx_f, z_b, z_f, sum_p, sum_pb, wf, wb

    with nogil:
        for b in range(B):
            ncls = 0.0
            for c in range(C):
                ncls = ncls + cls[b, c] * cls[b, c]
            ncls = _fmax(sqrt(ncls), COS_EPS)
            for t in range(L):
                nx = 0.0
                dot = 0.0
                for c in range(C):
                    nx = nx + tokens[b, t, c] * tokens[b, t, c]
                    dot = dot + tokens[b, t, c] * cls[b, c]
                norm[t] = sqrt(nx)
                dotc[t] = dot

            for r in range(side):
                for q in range(side):
                    # gather in-bounds neighbours; pads are skipped entirely
                    n = 0
                    for dr in range(-half, half + 1):
                        rr = r + dr
                        if rr < 0 or rr >= side:
                            continue
                        for dq in range(-half, half + 1):
                            qq = q + dq
                            if qq < 0 or qq >= side:
                                continue
                            idx[n] = rr * side + qq
                            n = n + 1

                    for c in range(C):
                        mu[c] = 0.0
                    sum_p = 0.0
                    sum_pb = 0.0
                    for k in range(n):
                        t = idx[k]
                        p = mask[b, t]
                        sum_p = sum_p + p
                        sum_pb = sum_pb + (1.0 - p)
                        for c in range(C):
                            mu[c] = mu[c] + p * tokens[b, t, c]
                    for c in range(C):
                        mu[c] = mu[c] / n

                    mx_b = -1e300
                    mx_f = -1e300
                    for k in range(n):
                        t = idx[k]
                        p = mask[b, t]
                        pb = 1.0 - p
                        # background stability: cos(pb*x, cls) * ||pb*x||
                        cosv = pb * dotc[t] / (_fmax(pb * norm[t], COS_EPS) * ncls)
                        sbg[k] = cosv * pb * norm[t]
                        # foreground richness: (1 - cos(p*x, cls)) * ||p*x - mu||
                        cosv = p * dotc[t] / (_fmax(p * norm[t], COS_EPS) * ncls)
                        dev = 0.0
                        for c in range(C):
                            d = p * tokens[b, t, c] - mu[c]
                            dev = dev + d * d
                        rfg[k] = (1.0 - cosv) * sqrt(dev)
                        if sbg[k] > mx_b:
                            mx_b = sbg[k]
                        if rfg[k] > mx_f:
                            mx_f = rfg[k]
                    z_b = 0.0
                    z_f = 0.0
                    for k in range(n):
                        sbg[k] = exp(sbg[k] - mx_b)
                        rfg[k] = exp(rfg[k] - mx_f)
                        z_b = z_b + sbg[k]
                        z_f = z_f + rfg[k]

                    t = r * side + q
                    for k in range(n):
                        p = mask[b, idx[k]]
                        wf = rfg[k] / z_f * p / (sum_p + eps)
                        wb = sbg[k] / z_b * (1.0 - p) / (sum_pb + eps)
                        for c in range(C):
                            out[b, t, c] = out[b, t, c] + (wf + wb) * tokens[b, idx[k], c]
    return out_arr
