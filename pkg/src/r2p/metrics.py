"""Chamfer and Earth Mover's distances between point clouds.

Both use plain (non-squared) Euclidean distances and averages over points:

* ``chamfer``: mean nearest-neighbour distance from S1 to S2 plus the same
  from S2 to S1.
* EMD: the minimum over bijections S1 -> S2 of the mean matched distance.
  ``emd_exact`` solves the assignment with the Hungarian method and
  ``emd_approx`` with an epsilon-scaling auction.

Gradients are taken w.r.t. the first cloud only, holding the nearest
neighbours / the matching fixed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import kernels
from .errors import CapacityError, ConsistencyError, ContractError, EmptyInputError, UsageError

BRUTE_FORCE_MAX = 512
EXACT_CAP = 1024


def as_points(cloud) -> np.ndarray:
    """(n, 3) contiguous float64 view of a PointCloud, Tensor or array."""
    pts = getattr(cloud, "points", cloud)
    pts = getattr(pts, "data", pts)
    arr = np.ascontiguousarray(pts, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ContractError(f"expected an (n, 3) point array, got shape {arr.shape}")
    return arr


def _nonempty(*clouds):
    out = [as_points(c) for c in clouds]
    for c in out:
        if c.shape[0] == 0:
            raise EmptyInputError("point cloud is empty")
    return out


def nearest_neighbors(a: np.ndarray, b: np.ndarray, method: str = "auto"):
    """Distance and index of the nearest point of ``b`` for every point of ``a``.

    ``method`` is ``"brute"``, ``"kdtree"`` or ``"auto"`` (brute force while
    both clouds have at most 512 points).
    """
    if method == "auto":
        method = "brute" if max(len(a), len(b)) <= BRUTE_FORCE_MAX else "kdtree"
    if method == "brute":
        return kernels.nearest_neighbors(a, b)
    if method != "kdtree":
        raise UsageError(f"unknown nearest-neighbour method {method!r}")
    # collapse duplicates onto their first occurrence so ties resolve to the lowest index
    uniq, first = np.unique(b, axis=0, return_index=True)
    if len(uniq) == 1:
        idx = np.zeros(len(a), dtype=np.intp)
    else:
        dk, k = cKDTree(uniq).query(a, k=2)
        idx = first[k[:, 0]].astype(np.intp)
        # distinct points at (nearly) equal distance: settle those rows exactly
        near_tie = dk[:, 1] <= dk[:, 0] * (1 + 1e-9) + 1e-300
        if near_tie.any():
            idx[near_tie] = kernels.nearest_neighbors(np.ascontiguousarray(a[near_tie]), b)[1]
    # same arithmetic as the brute-force kernel -> bit-identical distances
    diff = a - b[idx]
    d2 = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1]
    d2 = d2 + diff[:, 2] * diff[:, 2]
    return np.sqrt(d2), idx


def chamfer(s1, s2, squared: bool = False, method: str = "auto") -> float:
    a, b = _nonempty(s1, s2)
    d_ab, _ = nearest_neighbors(a, b, method)
    d_ba, _ = nearest_neighbors(b, a, method)
    if squared:
        d_ab, d_ba = d_ab * d_ab, d_ba * d_ba
    return float(d_ab.mean() + d_ba.mean())


def chamfer_value_and_grad(s1, s2, squared: bool = False, method: str = "auto"):
    """Chamfer distance and its gradient w.r.t. the points of ``s1``."""
    a, b = _nonempty(s1, s2)
    n1, n2 = len(a), len(b)
    d_ab, j_ab = nearest_neighbors(a, b, method)
    d_ba, j_ba = nearest_neighbors(b, a, method)
    diff_ab = a - b[j_ab]
    diff_ba = a[j_ba] - b
    if squared:
        value = float((d_ab * d_ab).mean() + (d_ba * d_ba).mean())
        w_ab = np.full(n1, 2.0 / n1)
        w_ba = np.full(n2, 2.0 / n2)
    else:
        value = float(d_ab.mean() + d_ba.mean())
        # zero-length pairs contribute no gradient
        w_ab = np.divide(1.0 / n1, d_ab, out=np.zeros(n1), where=d_ab > 0)
        w_ba = np.divide(1.0 / n2, d_ba, out=np.zeros(n2), where=d_ba > 0)
    grad = diff_ab * w_ab[:, None]
    np.add.at(grad, j_ba, diff_ba * w_ba[:, None])
    return value, grad


def chamfer_grad(s1, s2, squared: bool = False, method: str = "auto") -> np.ndarray:
    return chamfer_value_and_grad(s1, s2, squared, method)[1]


@dataclass(frozen=True)
class Matching:
    """A bijection between two equal-size clouds and its mean matched distance.

    ``assignment[i]`` is the index in S2 matched to point ``i`` of S1.  For
    auction results ``eps_final`` is set and the total cost is within
    ``bound = n * eps_final`` of the optimum (mean cost within ``eps_final``).
    """

    assignment: np.ndarray
    cost: float
    method: str = "hungarian"
    eps_final: float | None = None

    @property
    def bound(self) -> float:
        if self.eps_final is None:
            return 0.0
        return len(self.assignment) * self.eps_final

    def is_bijection(self) -> bool:
        n = len(self.assignment)
        a = np.asarray(self.assignment)
        return bool(a.min(initial=0) >= 0 and a.max(initial=-1) < n and len(np.unique(a)) == n)


def matched_cost(a: np.ndarray, b: np.ndarray, assignment: np.ndarray) -> float:
    return float(np.linalg.norm(a - b[assignment], axis=1).mean())


def _check_pair(s1, s2):
    a, b = _nonempty(s1, s2)
    if len(a) != len(b):
        raise ContractError(
            f"EMD is defined through a bijection and needs clouds of equal size; got {len(a)} and {len(b)} points"
        )
    return a, b


def emd_exact(s1, s2, cap: int = EXACT_CAP) -> Matching:
    """Optimal matching by the Hungarian method (O(n^3)); refuses clouds above ``cap``."""
    a, b = _check_pair(s1, s2)
    n = len(a)
    if n > cap:
        raise CapacityError(f"{n} points exceeds the exact EMD cap of {cap}; use emd_approx for large clouds")
    cost = kernels.pairwise_distances(a, b)
    assign = kernels.hungarian(cost)
    return Matching(assign, matched_cost(a, b, assign), "hungarian")


def emd_approx(s1, s2, eps: float | None = None, scaling: float = 5.0) -> Matching:
    """Approximate optimal matching by an auction with epsilon scaling.

    Parameters
    ----------
    eps : float, optional
        Final epsilon in distance units.  The mean matched distance is at
        most ``eps`` above the optimum.  Defaults to ``1e-4`` times the
        largest pairwise distance.
    scaling : float
        Factor by which epsilon shrinks between auction phases.
    """
    a, b = _check_pair(s1, s2)
    n = len(a)
    cost = kernels.pairwise_distances(a, b)
    cmax = float(cost.max())
    if cmax == 0.0:
        return Matching(np.arange(n, dtype=np.intp), 0.0, "auction", 0.0)
    eps_final = 1e-4 * cmax if eps is None else float(eps)
    if eps_final <= 0:
        raise UsageError("auction eps must be positive")
    if scaling <= 1:
        raise UsageError("eps scaling factor must exceed 1")
    prices = np.zeros(n)
    eps_cur = max(cmax / 4.0, eps_final)
    while True:
        assign, _ = kernels.auction_phase(cost, prices, eps_cur)
        if eps_cur <= eps_final:
            break
        eps_cur = max(eps_cur / scaling, eps_final)
    return Matching(assign, matched_cost(a, b, assign), "auction", eps_final)


def emd(s1, s2, cap: int = EXACT_CAP, eps: float | None = None) -> Matching:
    """Exact matching up to ``cap`` points, auction above."""
    n = len(as_points(s1))
    if n <= cap:
        return emd_exact(s1, s2, cap)
    return emd_approx(s1, s2, eps)


def emd_grad(s1, s2, matching: Matching, rtol: float = 1e-9) -> np.ndarray:
    """Gradient of the mean matched distance w.r.t. ``s1`` with the matching held fixed."""
    a, b = _check_pair(s1, s2)
    assign = np.asarray(matching.assignment, dtype=np.intp)
    if assign.shape != (len(a),) or not matching.is_bijection():
        raise ConsistencyError("matching is not a bijection over these clouds")
    diff = a - b[assign]
    d = np.linalg.norm(diff, axis=1)
    cost = float(d.mean())
    if abs(cost - matching.cost) > rtol * max(1.0, abs(cost)):
        raise ConsistencyError(
            f"stale matching: stored cost {matching.cost:.12g} but the clouds give {cost:.12g}"
        )
    n = len(a)
    w = np.divide(1.0 / n, d, out=np.zeros(n), where=d > 0)
    return diff * w[:, None]
