# cython: language_level=3
"""Compiled kernels for batched symmetric 3x3 matrix functions.

Mirrors ``hybridcast._fallback`` function for function. Every routine takes
C-contiguous float64 arrays with a leading batch axis.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs

cnp.import_array()

cdef int MAX_SWEEPS = 50


cdef void _jacobi3(const double* a, double* w, double* v) noexcept nogil:
    cdef double m[3][3]
    cdef int i, j, k, p, q, r, sweep
    cdef double off, scale, apq, theta, t, c, s, arp, arq, vkp, vkq
    for i in range(3):
        for j in range(3):
            m[i][j] = a[3 * i + j]
            v[3 * i + j] = 1.0 if i == j else 0.0
    for sweep in range(MAX_SWEEPS):
        off = m[0][1] * m[0][1] + m[0][2] * m[0][2] + m[1][2] * m[1][2]
        scale = m[0][0] * m[0][0] + m[1][1] * m[1][1] + m[2][2] * m[2][2]
        if off == 0.0 or off <= 1e-36 * scale:
            break
        for p in range(2):
            for q in range(p + 1, 3):
                apq = m[p][q]
                if apq == 0.0:
                    continue
                if fabs(apq) < 1e-18 * (fabs(m[p][p]) + fabs(m[q][q])):
                    m[p][q] = 0.0
                    m[q][p] = 0.0
                    continue
                theta = (m[q][q] - m[p][p]) / (2.0 * apq)
                t = 1.0 / (fabs(theta) + sqrt(theta * theta + 1.0))
                if theta < 0.0:
                    t = -t
                c = 1.0 / sqrt(t * t + 1.0)
                s = t * c
                r = 3 - p - q
                m[p][p] = m[p][p] - t * apq
                m[q][q] = m[q][q] + t * apq
                m[p][q] = 0.0
                m[q][p] = 0.0
                arp = m[r][p]
                arq = m[r][q]
                m[r][p] = c * arp - s * arq
                m[p][r] = m[r][p]
                m[r][q] = s * arp + c * arq
                m[q][r] = m[r][q]
                for k in range(3):
                    vkp = v[3 * k + p]
                    vkq = v[3 * k + q]
                    v[3 * k + p] = c * vkp - s * vkq
                    v[3 * k + q] = s * vkp + c * vkq
    for i in range(3):
        w[i] = m[i][i]


def sym3_eigh(cnp.ndarray A):
    """Eigendecomposition of a batch of symmetric 3x3 matrices, shape (N, 3, 3)."""
    cdef cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] a = np.ascontiguousarray(A, dtype=np.float64)
    cdef Py_ssize_t n = a.shape[0], b
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] w = np.empty((n, 3))
    cdef cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] V = np.empty((n, 3, 3))
    cdef double* ap = &a[0, 0, 0] if n else NULL
    cdef double* wp = &w[0, 0] if n else NULL
    cdef double* vp = &V[0, 0, 0] if n else NULL
    with nogil:
        for b in range(n):
            _jacobi3(ap + 9 * b, wp + 3 * b, vp + 9 * b)
    return w, V


def sym3_funm(cnp.ndarray V_, cnp.ndarray fw_):
    """Rebuild V diag(fw) V^T for each batch entry."""
    cdef cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] V = np.ascontiguousarray(V_, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] fw = np.ascontiguousarray(fw_, dtype=np.float64)
    cdef Py_ssize_t n = V.shape[0], b
    cdef int i, j, k
    cdef double acc
    cdef cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] out = np.empty((n, 3, 3))
    with nogil:
        for b in range(n):
            for i in range(3):
                for j in range(i, 3):
                    acc = 0.0
                    for k in range(3):
                        acc = acc + V[b, i, k] * fw[b, k] * V[b, j, k]
                    out[b, i, j] = acc
                    out[b, j, i] = acc
    return out


def loewner(cnp.ndarray w_, cnp.ndarray fw_, cnp.ndarray dfw_, double tol=1e-7):
    """First divided differences of f at the eigenvalues, shape (N, 3, 3)."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] w = np.ascontiguousarray(w_, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] fw = np.ascontiguousarray(fw_, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] dfw = np.ascontiguousarray(dfw_, dtype=np.float64)
    cdef Py_ssize_t n = w.shape[0], b
    cdef int i, j
    cdef double gap, mag
    cdef cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] D = np.empty((n, 3, 3))
    with nogil:
        for b in range(n):
            for i in range(3):
                D[b, i, i] = dfw[b, i]
                for j in range(i + 1, 3):
                    gap = w[b, i] - w[b, j]
                    mag = fabs(w[b, i])
                    if fabs(w[b, j]) > mag:
                        mag = fabs(w[b, j])
                    if mag < 1.0:
                        mag = 1.0
                    if fabs(gap) > tol * mag:
                        D[b, i, j] = (fw[b, i] - fw[b, j]) / gap
                    else:
                        D[b, i, j] = 0.5 * (dfw[b, i] + dfw[b, j])
                    D[b, j, i] = D[b, i, j]
    return D


def sym3_funm_vjp(cnp.ndarray w_, cnp.ndarray V_, cnp.ndarray fw_, cnp.ndarray dfw_, cnp.ndarray G_):
    """Pull back an output cotangent G through A -> f(A) (Daleckii-Krein)."""
    cdef cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] V = np.ascontiguousarray(V_, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] G = np.ascontiguousarray(G_, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] D = loewner(w_, fw_, dfw_)
    cdef Py_ssize_t n = V.shape[0], b
    cdef int i, j, k, l
    cdef double acc
    cdef double gs[3][3]
    cdef double m[3][3]
    cdef double tmp[3][3]
    cdef cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] out = np.empty((n, 3, 3))
    with nogil:
        for b in range(n):
            for i in range(3):
                for j in range(3):
                    gs[i][j] = 0.5 * (G[b, i, j] + G[b, j, i])
            # tmp = gs V
            for i in range(3):
                for j in range(3):
                    acc = 0.0
                    for k in range(3):
                        acc = acc + gs[i][k] * V[b, k, j]
                    tmp[i][j] = acc
            # m = (V^T tmp) * D
            for i in range(3):
                for j in range(3):
                    acc = 0.0
                    for k in range(3):
                        acc = acc + V[b, k, i] * tmp[k][j]
                    m[i][j] = acc * D[b, i, j]
            # out = V m V^T
            for i in range(3):
                for j in range(3):
                    acc = 0.0
                    for k in range(3):
                        acc = acc + V[b, i, k] * m[k][j]
                    tmp[i][j] = acc
            for i in range(3):
                for j in range(3):
                    acc = 0.0
                    for l in range(3):
                        acc = acc + tmp[i][l] * V[b, j, l]
                    out[b, i, j] = acc
    return out
