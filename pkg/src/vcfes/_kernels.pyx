# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; see ``_kernels_py`` for the reference semantics."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY

cnp.import_array()

DEGENERATE_DISTANCE = 2.0


ctypedef fused gallery_t:
    float
    double


cdef void _scan(const double[:, ::1] q, const gallery_t[:, :, ::1] g,
                double[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t n = g.shape[0], d = g.shape[2]
    cdef Py_ssize_t i, s, k
    cdef double acc, diff
    cdef bint q_dead[4]
    cdef bint g_dead
    for s in range(4):
        q_dead[s] = True
        for k in range(d):
            if q[s, k] != 0.0:
                q_dead[s] = False
                break
    for i in range(n):
        for s in range(4):
            g_dead = True
            acc = 0.0
            for k in range(d):
                if g[i, s, k] != 0:
                    g_dead = False
                diff = <double>g[i, s, k] - q[s, k]
                acc = acc + diff * diff
            if g_dead or q_dead[s]:
                out[i, s] = 2.0
            else:
                out[i, s] = sqrt(acc)


def space_distances(query, gallery):
    cdef const double[:, ::1] q = np.ascontiguousarray(query, dtype=np.float64)
    gallery = np.ascontiguousarray(gallery)
    if gallery.dtype != np.float32:
        gallery = gallery.astype(np.float64)
    if gallery.ndim != 3 or gallery.shape[1] != 4 or q.shape[0] != 4 \
            or gallery.shape[2] != q.shape[1]:
        raise ValueError("shape mismatch between query and gallery")
    out = np.empty((gallery.shape[0], 4), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef const float[:, :, ::1] g32
    cdef const double[:, :, ::1] g64
    if gallery.dtype == np.float32:
        g32 = gallery
        with nogil:
            _scan(q, g32, o)
    else:
        g64 = gallery
        with nogil:
            _scan(q, g64, o)
    return out


def fuse(dists, weights):
    cdef const double[:, ::1] dm = np.ascontiguousarray(dists, dtype=np.float64)
    cdef const double[:, ::1] w = np.ascontiguousarray(weights, dtype=np.float64)
    cdef Py_ssize_t n = dm.shape[0], i
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = (dm[i, 0] + dm[i, 1] * w[i, 0]
                    + dm[i, 2] * w[i, 1] + dm[i, 3] * w[i, 2]) / 2.0
    return out


def pairwise_distances(vectors):
    cdef const double[:, ::1] v = np.ascontiguousarray(vectors, dtype=np.float64)
    cdef Py_ssize_t n = v.shape[0], d = v.shape[1], i, j, k
    cdef double acc, diff
    out = np.zeros((n, n), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(n):
            for j in range(i + 1, n):
                acc = 0.0
                for k in range(d):
                    diff = v[i, k] - v[j, k]
                    acc = acc + diff * diff
                o[i, j] = sqrt(acc)
                o[j, i] = o[i, j]
    return out


def batch_hard(dist, labels, valid=None):
    cdef const double[:, ::1] dm = np.ascontiguousarray(dist, dtype=np.float64)
    cdef const cnp.int64_t[::1] lab = np.ascontiguousarray(labels, dtype=np.int64)
    cdef Py_ssize_t n = dm.shape[0], i, j
    if valid is None:
        valid = np.ones(n, dtype=np.uint8)
    cdef const cnp.uint8_t[::1] ok = np.ascontiguousarray(valid, dtype=np.uint8)
    cdef double best_p, best_n
    pos = np.full(n, -1, dtype=np.int64)
    neg = np.full(n, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] p = pos
    cdef cnp.int64_t[::1] q = neg
    with nogil:
        for i in range(n):
            best_p = -INFINITY
            best_n = INFINITY
            for j in range(n):
                if not ok[j]:
                    continue
                if lab[j] == lab[i]:
                    if j != i and dm[i, j] > best_p:
                        best_p = dm[i, j]
                        p[i] = j
                elif dm[i, j] < best_n:
                    best_n = dm[i, j]
                    q[i] = j
    return pos, neg
