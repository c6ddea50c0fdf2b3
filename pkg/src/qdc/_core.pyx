# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Same contracts as ``qdc._fallback``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()


def csr_matmat(const long long[::1] indptr, const long long[::1] indices,
               const double[::1] data, X):
    cdef const double[:, ::1] x = np.ascontiguousarray(X, dtype=np.float64)
    cdef Py_ssize_t n_rows = indptr.shape[0] - 1
    cdef Py_ssize_t m = x.shape[1]
    out_arr = np.zeros((n_rows, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, p, c, j
    cdef double v
    with nogil:
        for i in range(n_rows):
            for p in range(indptr[i], indptr[i + 1]):
                j = indices[p]
                v = data[p]
                for c in range(m):
                    out[i, c] += v * x[j, c]
    return out_arr


def threshold_block(block, double eps):
    cdef const double[:, ::1] b = np.ascontiguousarray(block, dtype=np.float64)
    cdef Py_ssize_t h = b.shape[0], n = b.shape[1]
    counts_arr = np.zeros(h, dtype=np.int64)
    cdef long long[::1] counts = counts_arr
    cdef Py_ssize_t i, j, total = 0
    cdef double v
    with nogil:
        for i in range(h):
            for j in range(n):
                v = b[i, j]
                if v != 0.0 and fabs(v) >= eps:
                    counts[i] += 1
            total += counts[i]
    cols_arr = np.empty(total, dtype=np.int64)
    vals_arr = np.empty(total, dtype=np.float64)
    cdef long long[::1] cols = cols_arr
    cdef double[::1] vals = vals_arr
    cdef Py_ssize_t q = 0
    with nogil:
        for i in range(h):
            for j in range(n):
                v = b[i, j]
                if v != 0.0 and fabs(v) >= eps:
                    cols[q] = j
                    vals[q] = v
                    q += 1
    return counts_arr, cols_arr, vals_arr


cdef inline bint _before(double ma, Py_ssize_t ja, double mb, Py_ssize_t jb) noexcept nogil:
    # strict "ranks ahead of": larger magnitude, then lower column
    return ma > mb or (ma == mb and ja < jb)


cdef void _sift_down(double* hm, Py_ssize_t* hj, Py_ssize_t size, Py_ssize_t pos) noexcept nogil:
    # min-heap under _before ordering: root is the weakest kept entry
    cdef Py_ssize_t child
    cdef double tm
    cdef Py_ssize_t tj
    while True:
        child = 2 * pos + 1
        if child >= size:
            break
        if child + 1 < size and _before(hm[child], hj[child], hm[child + 1], hj[child + 1]):
            child += 1
        if _before(hm[pos], hj[pos], hm[child], hj[child]):
            tm = hm[pos]; hm[pos] = hm[child]; hm[child] = tm
            tj = hj[pos]; hj[pos] = hj[child]; hj[child] = tj
            pos = child
        else:
            break


def topk_block(block, long long k):
    cdef const double[:, ::1] b = np.ascontiguousarray(block, dtype=np.float64)
    cdef Py_ssize_t h = b.shape[0], n = b.shape[1]
    cdef Py_ssize_t kk = min(k, n)
    heap_m_arr = np.empty(max(kk, 1), dtype=np.float64)
    heap_j_arr = np.empty(max(kk, 1), dtype=np.intp)
    keep_arr = np.zeros(n, dtype=np.uint8)
    cdef double[::1] heap_m = heap_m_arr
    cdef Py_ssize_t[::1] heap_j = heap_j_arr
    cdef unsigned char[::1] keep = keep_arr
    counts_arr = np.zeros(h, dtype=np.int64)
    cdef long long[::1] counts = counts_arr
    cols_arr = np.empty(h * kk, dtype=np.int64)
    vals_arr = np.empty(h * kk, dtype=np.float64)
    cdef long long[::1] cols = cols_arr
    cdef double[::1] vals = vals_arr
    cdef Py_ssize_t i, j, size, q = 0, t
    cdef double m
    with nogil:
        for i in range(h):
            size = 0
            for j in range(n):
                m = fabs(b[i, j])
                if m == 0.0 or kk == 0:
                    continue
                if size < kk:
                    heap_m[size] = m
                    heap_j[size] = j
                    size += 1
                    if size == kk:
                        # heapify once full
                        t = kk // 2
                        while t > 0:
                            t -= 1
                            _sift_down(&heap_m[0], &heap_j[0], size, t)
                elif _before(m, j, heap_m[0], heap_j[0]):
                    heap_m[0] = m
                    heap_j[0] = j
                    _sift_down(&heap_m[0], &heap_j[0], size, 0)
            for t in range(size):
                keep[heap_j[t]] = 1
            for j in range(n):
                if keep[j]:
                    cols[q] = j
                    vals[q] = b[i, j]
                    q += 1
                    keep[j] = 0
            counts[i] = size
    return counts_arr, cols_arr[:q].copy(), vals_arr[:q].copy()


def homophily_counts(const long long[::1] indptr, const long long[::1] indices,
                     const long long[::1] labels):
    cdef Py_ssize_t n = indptr.shape[0] - 1
    same_arr = np.zeros(n, dtype=np.int64)
    total_arr = np.zeros(n, dtype=np.int64)
    cdef long long[::1] same = same_arr
    cdef long long[::1] total = total_arr
    cdef Py_ssize_t i, p, j
    with nogil:
        for i in range(n):
            for p in range(indptr[i], indptr[i + 1]):
                j = indices[p]
                if j == i:
                    continue
                total[i] += 1
                if labels[j] == labels[i]:
                    same[i] += 1
    return same_arr, total_arr
