# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled k-means assignment loop; mirrors ``_kernels_py.assign_nearest``."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def assign_nearest(const double[:, ::1] points, const double[:, ::1] centers):
    cdef Py_ssize_t n = points.shape[0], k = centers.shape[0], d = points.shape[1]
    cdef Py_ssize_t i, j, t
    cdef double acc, diff, best
    cdef Py_ssize_t arg
    if centers.shape[1] != d:
        raise ValueError(f"dimension mismatch: points have d={d}, centers d={centers.shape[1]}")
    labels_arr = np.empty(n, dtype=np.int64)
    dist_arr = np.empty(n, dtype=np.float64)
    cdef cnp.int64_t[::1] labels = labels_arr
    cdef double[::1] dist = dist_arr
    with nogil:
        for i in range(n):
            best = 0.0
            arg = -1
            for j in range(k):
                acc = 0.0
                for t in range(d):
                    diff = points[i, t] - centers[j, t]
                    acc = acc + diff * diff
                if arg < 0 or acc < best:
                    best = acc
                    arg = j
            labels[i] = arg
            dist[i] = best
    return labels_arr, dist_arr
