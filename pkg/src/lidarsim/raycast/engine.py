"""Full-sweep casting over a composed scene."""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..geometry import DEFAULT_T_MIN, Pose, Surfels, se3_apply
from ..scene import Scene, interpolate_poses, warn_if_uncovered
from .bvh import BVH, build_bvh, closest_hits, refit_bvh
from .sensor import N_ACTOR_INTERVALS, RayGrid, SensorIntrinsics, generate_rays

STATIC_SOURCE = -1
NO_SOURCE = -2


@dataclass
class HitImage:
    """Closest hits per (beam, column) cell. Empty cells hold NaN / -1."""

    range: np.ndarray  # (rows, cols), NaN for no return
    surfel_index: np.ndarray  # global index: static first, then actors in order
    source: np.ndarray  # STATIC_SOURCE, actor index, or NO_SOURCE
    incidence: np.ndarray
    point: np.ndarray  # (rows, cols, 3)
    masked: np.ndarray  # cell had a hit on the SDV itself
    orig_intensity: np.ndarray
    orig_range: np.ndarray
    orig_incidence: np.ndarray
    semantic: np.ndarray  # uint8 class codes, 0 for empty
    rays: RayGrid

    @property
    def shape(self) -> tuple[int, int]:
        return self.range.shape

    @property
    def occupied(self) -> np.ndarray:
        return self.surfel_index >= 0

    @property
    def n_returns(self) -> int:
        return int(self.occupied.sum())


class ActorBVHCache:
    """Per-actor, per-interval BVHs of the actor surfels posed at the interval midpoint.

    Each actor's tree is built once over its local surfels and refit to every pose.
    """

    def __init__(self, scene: Scene, sweep_start: float, period: float,
                 n_intervals: int = N_ACTOR_INTERVALS):
        self.scene = scene
        self.sweep_start = sweep_start
        self.period = period
        self.n_intervals = n_intervals
        self._cache: dict[tuple[int, int], BVH] = {}
        self._poses: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._base: dict[int, BVH] = {}  # tree over the actor's local surfels, refit per interval
        self._lock = threading.Lock()

    def interval_time(self, k: int) -> float:
        return self.sweep_start + (k + 0.5) * self.period / self.n_intervals

    def actor_pose(self, a: int, k: int) -> Pose:
        poses = self._poses.get(a)
        if poses is None:
            mid = self.sweep_start + (np.arange(self.n_intervals) + 0.5) * self.period / self.n_intervals
            poses = self._poses.setdefault(a, interpolate_poses(self.scene.actors[a].trajectory, mid))
        return Pose(poses[0][k], poses[1][k])

    def get(self, a: int, k: int) -> BVH:
        key = (a, k)
        hit = self._cache.get(key)
        if hit is None:
            local = self.scene.actors[a].surfels
            base = self._base.get(a)
            if base is None:
                with self._lock:
                    base = self._base.setdefault(a, build_bvh(local))
            pose = self.actor_pose(a, k)
            hit = refit_bvh(base, se3_apply(pose, local.center), pose.rotate(local.normal))
            with self._lock:
                hit = self._cache.setdefault(key, hit)
        return hit

    def __len__(self) -> int:
        return len(self._cache)


def _chunks(n: int, parts: int) -> list[np.ndarray]:
    parts = max(1, min(parts, n))
    return [c for c in np.array_split(np.arange(n), parts) if len(c)]


def _run(fn, tasks, threads: int):
    if threads <= 1 or len(tasks) <= 1:
        for t in tasks:
            fn(t)
        return
    with ThreadPoolExecutor(max_workers=threads) as ex:
        list(ex.map(fn, tasks))


def inside_box(local: np.ndarray, dims) -> np.ndarray:
    half = np.asarray(dims, dtype=np.float64) / 2.0
    return np.all(np.abs(local) <= half, axis=-1)


def cast_sweep(scene: Scene, intr: SensorIntrinsics, sweep_start: float, *,
               threads: int = 1, t_min: float = DEFAULT_T_MIN,
               n_intervals: int = N_ACTOR_INTERVALS,
               compensate_rotation: bool = False) -> HitImage:
    """Raycast one sweep over the static map and the moving actors.

    Actors are posed at the midpoint of the interval (out of `n_intervals`
    equal slices of the sweep) containing each column's firing time. Returns
    that land inside the SDV exclusion box, posed at the ray's own time, are
    removed and flagged in `masked`. The output does not depend on `threads`.
    """
    sweep_end = sweep_start + intr.sweep_period
    warn_if_uncovered(scene.sdv_trajectory, sweep_start, sweep_end, "SDV")
    for actor in scene.actors:
        warn_if_uncovered(actor.trajectory, sweep_start, sweep_end, f"actor {actor.asset_id!r}")
    rays = generate_rays(intr, scene.sdv_trajectory, sweep_start, compensate_rotation)
    rows, cols = intr.n_beams, intr.n_cols
    O = rays.origins.reshape(-1, 3)
    D = rays.directions.reshape(-1, 3)
    n = len(O)
    best_t = np.full(n, np.inf)
    best_i = np.full(n, -1, np.int64)

    static = scene.static.surfels
    bvh = scene.static.spatial_index

    def static_task(ids):
        closest_hits(bvh, O, D, ids, t_min, 0, best_t, best_i)

    _run(static_task, _chunks(n, threads * 4 if threads > 1 else 1), threads)

    offsets = np.cumsum([len(static)] + [len(a.surfels) for a in scene.actors])
    cache = ActorBVHCache(scene, sweep_start, intr.sweep_period, n_intervals)
    col_interval = intr.column_intervals(n_intervals)
    ray_cols = np.tile(np.arange(cols), rows)
    ray_interval = col_interval[ray_cols]
    if scene.actors:
        order = np.argsort(ray_interval, kind="stable")
        bounds = np.searchsorted(ray_interval[order], np.arange(n_intervals + 1))
        tasks = [(k, order[bounds[k]:bounds[k + 1]]) for k in range(n_intervals) if bounds[k + 1] > bounds[k]]

        def actor_task(task):
            k, ids = task
            for a in range(len(scene.actors)):
                if len(scene.actors[a].surfels) == 0:
                    continue
                abvh = cache.get(a, k)
                closest_hits(abvh, O, D, ids, t_min, int(offsets[a]), best_t, best_i)

        _run(actor_task, tasks, threads)

    hit = best_i >= 0
    source = np.full(n, NO_SOURCE, np.int64)
    source[hit] = np.searchsorted(offsets, best_i[hit], side="right") - 1
    source[hit & (best_i < len(static))] = STATIC_SOURCE

    rng = np.where(hit, best_t, np.nan)
    point = O + np.where(hit, best_t, 0.0)[:, None] * D

    # world-frame normals of the hit surfels
    normals = np.zeros((n, 3))
    sel = source == STATIC_SOURCE
    normals[sel] = static.normal[best_i[sel]]
    for a, actor in enumerate(scene.actors):
        sel_a = np.flatnonzero(source == a)
        if len(sel_a) == 0:
            continue
        local = best_i[sel_a] - offsets[a]
        for k in np.unique(ray_interval[sel_a]):
            m = ray_interval[sel_a] == k
            R = cache.actor_pose(a, int(k)).rotation
            normals[sel_a[m]] = actor.surfels.normal[local[m]] @ R.T
    incidence = np.where(hit, np.arccos(np.minimum(np.abs(np.sum(D * normals, axis=1)), 1.0)), np.nan)

    # SDV self-returns
    masked = np.zeros(n, dtype=bool)
    if hit.any():
        times = sweep_start + rays.time_offset
        Rs, ts = interpolate_poses(scene.sdv_trajectory, times)
        hit_ids = np.flatnonzero(hit)
        c = ray_cols[hit_ids]
        local = np.einsum("nji,nj->ni", Rs[c], point[hit_ids] - ts[c])
        masked[hit_ids] = inside_box(local, scene.exclusion_box)
    keep = hit & ~masked

    meta = Surfels.concat([static] + [a.surfels for a in scene.actors])
    gi = np.where(keep, best_i, 0)

    def pick(arr, fill):
        if len(arr) == 0:
            return np.full(n, fill, dtype=np.result_type(arr.dtype, type(fill)))
        return np.where(keep, arr[gi], fill)

    shape = (rows, cols)
    return HitImage(
        range=np.where(keep, rng, np.nan).reshape(shape),
        surfel_index=np.where(keep, best_i, -1).reshape(shape),
        source=np.where(keep, source, NO_SOURCE).reshape(shape),
        incidence=np.where(keep, incidence, np.nan).reshape(shape),
        point=np.where(keep[:, None], point, np.nan).reshape(rows, cols, 3),
        masked=masked.reshape(shape),
        orig_intensity=pick(meta.orig_intensity, 0.0).reshape(shape),
        orig_range=pick(meta.orig_range, 0.0).reshape(shape),
        orig_incidence=pick(meta.orig_incidence, 0.0).reshape(shape),
        semantic=pick(meta.semantic, 0).astype(np.uint8).reshape(shape),
        rays=rays,
    )
