"""Binary BVH over surfel disks with a numba closest-hit traversal."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from ..geometry import DEFAULT_T_MIN, Surfels

LEAF_SIZE = 4
TIE_EPS = 1e-9
BOX_PAD = 1e-9
_STACK = 128


@dataclass(frozen=True)
class BVH:
    node_min: np.ndarray  # (M, 3)
    node_max: np.ndarray  # (M, 3)
    node_left: np.ndarray  # (M,) child index, -1 for leaves
    node_right: np.ndarray
    node_start: np.ndarray  # leaf range into `order`
    node_count: np.ndarray
    order: np.ndarray  # (N,) surfel indices in leaf order
    center: np.ndarray
    normal: np.ndarray
    radius: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.node_left)

    @property
    def n_prims(self) -> int:
        return len(self.order)

    def depth(self) -> int:
        if self.n_nodes == 0:
            return 0
        best = 0
        stack = [(0, 1)]
        while stack:
            n, d = stack.pop()
            best = max(best, d)
            if self.node_left[n] >= 0:
                stack.append((self.node_left[n], d + 1))
                stack.append((self.node_right[n], d + 1))
        return best


@numba.njit(cache=True)
def _select(order, key, lo, hi, k):
    # in-place nth_element on order[lo:hi] by key[order[i]]
    while hi - lo > 1:
        mid = (lo + hi) // 2
        a, b, c = key[order[lo]], key[order[mid]], key[order[hi - 1]]
        if a < b:
            pivot = b if b < c else (c if a < c else a)
        else:
            pivot = a if a < c else (c if b < c else b)
        i, j = lo, hi - 1
        while i <= j:
            while key[order[i]] < pivot:
                i += 1
            while key[order[j]] > pivot:
                j -= 1
            if i <= j:
                tmp = order[i]
                order[i] = order[j]
                order[j] = tmp
                i += 1
                j -= 1
        if k <= j:
            hi = j + 1
        elif k >= i:
            lo = i
        else:
            return


@numba.njit(cache=True)
def _build(lo_b, hi_b, cen, leaf_size):
    n = lo_b.shape[0]
    max_nodes = max(1, 2 * n - 1)
    nmin = np.empty((max_nodes, 3))
    nmax = np.empty((max_nodes, 3))
    left = np.full(max_nodes, -1, np.int32)
    right = np.full(max_nodes, -1, np.int32)
    start = np.zeros(max_nodes, np.int64)
    count = np.zeros(max_nodes, np.int64)
    order = np.arange(n)
    key = np.empty(n)
    stack_node = np.empty(256, np.int64)
    sp = 0
    n_nodes = 1
    start[0] = 0
    count[0] = n
    stack_node[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack_node[sp]
        s = start[node]
        c = count[node]
        cmin = np.full(3, np.inf)
        cmax = np.full(3, -np.inf)
        for a in range(3):
            nmin[node, a] = np.inf
            nmax[node, a] = -np.inf
        for i in range(s, s + c):
            p = order[i]
            for a in range(3):
                if lo_b[p, a] < nmin[node, a]:
                    nmin[node, a] = lo_b[p, a]
                if hi_b[p, a] > nmax[node, a]:
                    nmax[node, a] = hi_b[p, a]
                if cen[p, a] < cmin[a]:
                    cmin[a] = cen[p, a]
                if cen[p, a] > cmax[a]:
                    cmax[a] = cen[p, a]
        if c <= leaf_size:
            continue
        axis = 0
        ext = cmax[0] - cmin[0]
        for a in range(1, 3):
            if cmax[a] - cmin[a] > ext:
                ext = cmax[a] - cmin[a]
                axis = a
        for i in range(s, s + c):
            key[order[i]] = cen[order[i], axis]
        m = s + c // 2
        _select(order, key, s, s + c, m)
        l_node = n_nodes
        r_node = n_nodes + 1
        n_nodes += 2
        left[node] = l_node
        right[node] = r_node
        start[l_node] = s
        count[l_node] = m - s
        start[r_node] = m
        count[r_node] = s + c - m
        stack_node[sp] = r_node
        stack_node[sp + 1] = l_node
        sp += 2
    return nmin[:n_nodes], nmax[:n_nodes], left[:n_nodes], right[:n_nodes], start[:n_nodes], count[:n_nodes], order


@numba.njit(cache=True)
def _disk_boxes(c, n, r):
    # a disk of radius r with unit normal n spans r * sqrt(1 - n_a^2) along axis a;
    # the extra padding keeps rim hits inside their box despite rounding
    lo = np.empty_like(c)
    hi = np.empty_like(c)
    for i in range(c.shape[0]):
        nn = math.sqrt(n[i, 0] * n[i, 0] + n[i, 1] * n[i, 1] + n[i, 2] * n[i, 2])
        for a in range(3):
            u = n[i, a] / nn if nn > 0.0 else 0.0
            half = r[i] * math.sqrt(min(max(1.0 - u * u, 0.0), 1.0))
            pad = half + BOX_PAD * (1.0 + abs(c[i, a]) + r[i])
            lo[i, a] = c[i, a] - pad
            hi[i, a] = c[i, a] + pad
    return lo, hi


def build_bvh(surfels: Surfels, leaf_size: int = LEAF_SIZE) -> BVH:
    """Median split on the longest centroid axis over tight per-disk boxes."""
    c = np.ascontiguousarray(surfels.center, dtype=np.float64)
    n = np.ascontiguousarray(surfels.normal, dtype=np.float64)
    r = np.ascontiguousarray(surfels.radius, dtype=np.float64)
    if len(c) == 0:
        z3 = np.zeros((0, 3))
        zi = np.zeros(0, np.int64)
        return BVH(z3, z3, np.zeros(0, np.int32), np.zeros(0, np.int32), zi, zi, zi, c, n, r)
    lo, hi = _disk_boxes(c, n, r)
    arrays = _build(lo, hi, c, leaf_size)
    return BVH(*arrays, c, n, r)


@numba.njit(cache=True)
def _refit(left, right, start, count, order, lo_b, hi_b, nmin, nmax):
    # children always follow their parent, so a reverse sweep sees them first
    for node in range(left.shape[0] - 1, -1, -1):
        if left[node] < 0:
            for a in range(3):
                nmin[node, a] = np.inf
                nmax[node, a] = -np.inf
            for i in range(start[node], start[node] + count[node]):
                p = order[i]
                for a in range(3):
                    nmin[node, a] = min(nmin[node, a], lo_b[p, a])
                    nmax[node, a] = max(nmax[node, a], hi_b[p, a])
        else:
            l, r = left[node], right[node]
            for a in range(3):
                nmin[node, a] = min(nmin[l, a], nmin[r, a])
                nmax[node, a] = max(nmax[l, a], nmax[r, a])


def refit_bvh(bvh: BVH, center: np.ndarray, normal: np.ndarray) -> BVH:
    """Same tree over moved disks: keeps the topology, recomputes every box.

    Meant for rigid motion of the surfels the tree was built on, where the
    split structure stays a good partition.
    """
    c = np.ascontiguousarray(center, dtype=np.float64)
    n = np.ascontiguousarray(normal, dtype=np.float64)
    if c.shape != bvh.center.shape:
        raise ValueError("refit needs one center per surfel of the original tree")
    if bvh.n_nodes == 0:
        return BVH(bvh.node_min, bvh.node_max, bvh.node_left, bvh.node_right, bvh.node_start,
                   bvh.node_count, bvh.order, c, n, bvh.radius)
    lo, hi = _disk_boxes(c, n, bvh.radius)
    nmin = np.empty_like(bvh.node_min)
    nmax = np.empty_like(bvh.node_max)
    _refit(bvh.node_left, bvh.node_right, bvh.node_start, bvh.node_count, bvh.order, lo, hi, nmin, nmax)
    return BVH(nmin, nmax, bvh.node_left, bvh.node_right, bvh.node_start, bvh.node_count, bvh.order,
               c, n, bvh.radius)


@numba.njit(inline="always")
def _better(t, idx, bt, bi):
    if t < bt - TIE_EPS:
        return True
    return abs(t - bt) < TIE_EPS and idx < bi


@numba.njit(inline="always")
def _axis(o, d, inv, lo, hi, t0, t1):
    # clip [t0, t1] against one slab; returns an empty interval (t0 > t1) on a miss
    if d == 0.0:
        if o < lo or o > hi:
            return 1.0, 0.0
        return t0, t1
    ta = (lo - o) * inv
    tb = (hi - o) * inv
    if ta > tb:
        ta, tb = tb, ta
    return max(t0, ta), min(t1, tb)


@numba.njit(inline="always")
def _slab(ox, oy, oz, dx, dy, dz, ix, iy, iz, nmin, nmax, node, t_min, t_max):
    # entry distance of the ray into the node's box, or inf if it misses within [t_min, t_max]
    t0, t1 = _axis(ox, dx, ix, nmin[node, 0], nmax[node, 0], t_min, t_max)
    if t0 > t1:
        return np.inf
    t0, t1 = _axis(oy, dy, iy, nmin[node, 1], nmax[node, 1], t0, t1)
    if t0 > t1:
        return np.inf
    t0, t1 = _axis(oz, dz, iz, nmin[node, 2], nmax[node, 2], t0, t1)
    if t0 > t1:
        return np.inf
    return t0


@numba.njit(nogil=True, cache=True)
def _closest_hits(nmin, nmax, left, right, start, count, order, center, normal, radius,
                  origins, dirs, ray_ids, t_min, index_offset, best_t, best_i):
    """Update best_t / best_i in place for the rays listed in `ray_ids`."""
    if left.shape[0] == 0:
        return
    stack = np.empty(_STACK, np.int64)
    entry = np.empty(_STACK)
    for rr in range(ray_ids.shape[0]):
        r = ray_ids[rr]
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        ix = 1.0 / dx if dx != 0.0 else 0.0
        iy = 1.0 / dy if dy != 0.0 else 0.0
        iz = 1.0 / dz if dz != 0.0 else 0.0
        bt = best_t[r]
        bi = best_i[r]
        sp = 0
        t_root = _slab(ox, oy, oz, dx, dy, dz, ix, iy, iz, nmin, nmax, 0, t_min, bt + TIE_EPS)
        if t_root < np.inf:
            stack[0] = 0
            entry[0] = t_root
            sp = 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            # a closer hit may have been found since this node was pushed
            if entry[sp] > bt + TIE_EPS:
                continue
            if left[node] < 0:
                for k in range(start[node], start[node] + count[node]):
                    p = order[k]
                    denom = dx * normal[p, 0] + dy * normal[p, 1] + dz * normal[p, 2]
                    if abs(denom) < 1e-9:
                        continue
                    t = ((center[p, 0] - ox) * normal[p, 0]
                         + (center[p, 1] - oy) * normal[p, 1]
                         + (center[p, 2] - oz) * normal[p, 2]) / denom
                    if not t > t_min:
                        continue
                    qx = ox + t * dx - center[p, 0]
                    qy = oy + t * dy - center[p, 1]
                    qz = oz + t * dz - center[p, 2]
                    if qx * qx + qy * qy + qz * qz > radius[p] * radius[p]:
                        continue
                    gi = p + index_offset
                    if _better(t, gi, bt, bi):
                        bt = t
                        bi = gi
                continue
            a = left[node]
            b = right[node]
            ta = _slab(ox, oy, oz, dx, dy, dz, ix, iy, iz, nmin, nmax, a, t_min, bt + TIE_EPS)
            tb = _slab(ox, oy, oz, dx, dy, dz, ix, iy, iz, nmin, nmax, b, t_min, bt + TIE_EPS)
            if ta > tb:
                a, b = b, a
                ta, tb = tb, ta
            if tb < np.inf:
                stack[sp] = b
                entry[sp] = tb
                sp += 1
            if ta < np.inf:
                stack[sp] = a
                entry[sp] = ta
                sp += 1
        best_t[r] = bt
        best_i[r] = bi


def closest_hits(bvh: BVH, origins, dirs, ray_ids=None, t_min=DEFAULT_T_MIN, index_offset=0,
                 best_t=None, best_i=None):
    """Closest disk hit per ray; returns (range, surfel index) with inf / -1 on a miss.

    Passing existing `best_t` / `best_i` arrays merges against earlier results
    (ties within 1e-9 m go to the lower index).
    """
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(origins)
    if best_t is None:
        best_t = np.full(n, np.inf)
    if best_i is None:
        best_i = np.full(n, -1, np.int64)
    if ray_ids is None:
        ray_ids = np.arange(n)
    _closest_hits(bvh.node_min, bvh.node_max, bvh.node_left, bvh.node_right, bvh.node_start,
                  bvh.node_count, bvh.order, bvh.center, bvh.normal, bvh.radius,
                  origins, dirs, np.asarray(ray_ids, dtype=np.int64), float(t_min),
                  int(index_offset), best_t, best_i)
    return best_t, best_i
