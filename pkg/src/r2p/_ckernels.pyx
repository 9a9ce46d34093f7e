# cython: language_level=3
"""Compiled inner loops for the point-cloud metrics.

Every routine here has a line-for-line counterpart in ``_pykernels`` that
follows the same arithmetic order and tie-breaking, so both backends return
identical results.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY

cnp.import_array()

BACKEND = "cython"


def nearest_neighbors(const double[:, ::1] a, const double[:, ::1] b):
    """For each row of ``a`` the nearest row of ``b`` (lowest index on ties).

    Returns (distances, indices)."""
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j, best_j
    cdef double ax, ay, az, dx, dy, dz, d2, best
    dist_arr = np.empty(n, dtype=np.float64)
    idx_arr = np.empty(n, dtype=np.intp)
    cdef double[::1] dist = dist_arr
    cdef Py_ssize_t[::1] idx = idx_arr
    with nogil:
        for i in range(n):
            ax = a[i, 0]
            ay = a[i, 1]
            az = a[i, 2]
            best = INFINITY
            best_j = 0
            for j in range(m):
                dx = ax - b[j, 0]
                dy = ay - b[j, 1]
                dz = az - b[j, 2]
                d2 = dx * dx + dy * dy
                d2 = d2 + dz * dz
                if d2 < best:
                    best = d2
                    best_j = j
            dist[i] = sqrt(best)
            idx[i] = best_j
    return dist_arr, idx_arr


def pairwise_distances(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    cdef double ax, ay, az, dx, dy, dz, d2
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(n):
            ax = a[i, 0]
            ay = a[i, 1]
            az = a[i, 2]
            for j in range(m):
                dx = ax - b[j, 0]
                dy = ay - b[j, 1]
                dz = az - b[j, 2]
                d2 = dx * dx + dy * dy
                d2 = d2 + dz * dz
                out[i, j] = sqrt(d2)
    return out_arr


def hungarian(const double[:, ::1] cost):
    """Minimum-cost perfect matching of a square matrix (shortest augmenting paths
    with row/column potentials).  Returns ``assign`` with ``assign[row] = col``."""
    cdef Py_ssize_t n = cost.shape[0]
    cdef Py_ssize_t i, j, i0, j0, j1
    cdef double delta, cur
    u_arr = np.zeros(n + 1)
    v_arr = np.zeros(n + 1)
    minv_arr = np.empty(n + 1)
    p_arr = np.zeros(n + 1, dtype=np.intp)
    way_arr = np.zeros(n + 1, dtype=np.intp)
    used_arr = np.zeros(n + 1, dtype=np.uint8)
    cdef double[::1] u = u_arr, v = v_arr, minv = minv_arr
    cdef Py_ssize_t[::1] p = p_arr, way = way_arr
    cdef unsigned char[::1] used = used_arr
    with nogil:
        for i in range(1, n + 1):
            p[0] = i
            j0 = 0
            for j in range(n + 1):
                minv[j] = INFINITY
                used[j] = 0
            while True:
                used[j0] = 1
                i0 = p[j0]
                delta = INFINITY
                j1 = 0
                for j in range(1, n + 1):
                    if not used[j]:
                        cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                        if cur < minv[j]:
                            minv[j] = cur
                            way[j] = j0
                        if minv[j] < delta:
                            delta = minv[j]
                            j1 = j
                for j in range(n + 1):
                    if used[j]:
                        u[p[j]] += delta
                        v[j] -= delta
                    else:
                        minv[j] -= delta
                j0 = j1
                if p[j0] == 0:
                    break
            while True:
                j1 = way[j0]
                p[j0] = p[j1]
                j0 = j1
                if j0 == 0:
                    break
    assign = np.empty(n, dtype=np.intp)
    for j in range(1, n + 1):
        assign[p_arr[j] - 1] = j - 1
    return assign


def auction_phase(const double[:, ::1] cost, double[::1] prices, double eps):
    """One Gauss-Seidel auction round at fixed ``eps`` starting from an empty
    assignment.  Bidders maximise ``-cost - price``; ``prices`` is updated in
    place.  Returns (assign row->col, number of bids)."""
    cdef Py_ssize_t n = cost.shape[0]
    cdef Py_ssize_t i, j, j1, head, tail, prev, bids = 0
    cdef double v, best1, best2
    owner_arr = np.full(n, -1, dtype=np.intp)
    assign_arr = np.full(n, -1, dtype=np.intp)
    queue_arr = np.arange(n, dtype=np.intp)
    cdef Py_ssize_t[::1] owner = owner_arr, assign = assign_arr, queue = queue_arr
    # circular FIFO holding at most n unassigned bidders
    head = 0
    tail = 0
    cdef Py_ssize_t pending = n
    with nogil:
        while pending > 0:
            i = queue[head]
            head = head + 1
            if head == n:
                head = 0
            pending -= 1
            best1 = -INFINITY
            best2 = -INFINITY
            j1 = 0
            for j in range(n):
                v = -cost[i, j] - prices[j]
                if v > best1:
                    best2 = best1
                    best1 = v
                    j1 = j
                elif v > best2:
                    best2 = v
            if n == 1:
                best2 = best1
            prices[j1] = prices[j1] + (best1 - best2 + eps)
            bids += 1
            prev = owner[j1]
            owner[j1] = i
            assign[i] = j1
            if prev >= 0:
                assign[prev] = -1
                queue[tail] = prev
                tail = tail + 1
                if tail == n:
                    tail = 0
                pending += 1
    return assign_arr, bids
