"""Pure numpy versions of the compiled kernels.

Used when the extension is not built or ``R2P_PURE_PYTHON=1``.  The
arithmetic order and tie-breaking mirror ``_ckernels.pyx`` exactly.
"""
from collections import deque

import numpy as np

BACKEND = "python"

_CHUNK = 256


def _sqdist_block(a, b):
    dx = a[:, None, 0] - b[None, :, 0]
    dy = a[:, None, 1] - b[None, :, 1]
    dz = a[:, None, 2] - b[None, :, 2]
    d2 = dx * dx + dy * dy
    return d2 + dz * dz


def nearest_neighbors(a, b):
    n = a.shape[0]
    dist = np.empty(n)
    idx = np.empty(n, dtype=np.intp)
    for s in range(0, n, _CHUNK):
        d2 = _sqdist_block(a[s:s + _CHUNK], b)
        j = np.argmin(d2, axis=1)
        idx[s:s + _CHUNK] = j
        dist[s:s + _CHUNK] = np.sqrt(d2[np.arange(len(j)), j])
    return dist, idx


def pairwise_distances(a, b):
    out = np.empty((a.shape[0], b.shape[0]))
    for s in range(0, a.shape[0], _CHUNK):
        out[s:s + _CHUNK] = np.sqrt(_sqdist_block(a[s:s + _CHUNK], b))
    return out


def hungarian(cost):
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.intp)
    way = np.zeros(n + 1, dtype=np.intp)
    cols = np.arange(1, n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = cols[~used[1:]]
            cur = cost[i0 - 1, free - 1] - u[i0] - v[free]
            better = cur < minv[free]
            minv[free[better]] = cur[better]
            way[free[better]] = j0
            k = np.argmin(minv[free])
            delta = minv[free[k]]
            j1 = free[k]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
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
    assign[p[1:] - 1] = np.arange(n)
    return assign


def auction_phase(cost, prices, eps):
    n = cost.shape[0]
    owner = np.full(n, -1, dtype=np.intp)
    assign = np.full(n, -1, dtype=np.intp)
    queue = deque(range(n))
    bids = 0
    while queue:
        i = queue.popleft()
        vals = -cost[i] - prices
        j1 = int(np.argmax(vals))
        best1 = vals[j1]
        if n == 1:
            best2 = best1
        else:
            best2 = max(vals[:j1].max(initial=-np.inf), vals[j1 + 1:].max(initial=-np.inf))
        prices[j1] = prices[j1] + (best1 - best2 + eps)
        bids += 1
        prev = owner[j1]
        owner[j1] = i
        assign[i] = j1
        if prev >= 0:
            assign[prev] = -1
            queue.append(prev)
    return assign, bids
