"""Static map building: sweep aggregation, voxel downsampling, PCA normals, surfels."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import InputError
from .geometry import Pose, Surfels, incidence_angle, se3_apply
from .points import PointCloud

DEFAULT_VOXEL = 0.04
NORMAL_RADIUS = 0.20
NORMAL_MAX_NEIGHBORS = 200
DEGENERATE_RATIO = 1e-6


def disk_radius(voxel_size: float) -> float:
    """Half the voxel diagonal, so disks in adjacent voxels overlap."""
    return math.sqrt(3.0) / 2.0 * voxel_size


@dataclass
class SurfelMap:
    surfels: Surfels
    voxel_size: float = DEFAULT_VOXEL
    n_degenerate: int = 0
    _bvh: object = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.surfels)

    @property
    def spatial_index(self):
        """BVH over the surfel disks, built on first access."""
        if self._bvh is None:
            from .raycast.bvh import build_bvh

            self._bvh = build_bvh(self.surfels)
        return self._bvh


def aggregate_sweeps(
    sweeps: Sequence[tuple[PointCloud, Pose]], masks: Optional[Sequence[np.ndarray]] = None
) -> PointCloud:
    """Move every sweep into the map frame and drop points flagged dynamic.

    Each sweep is (points in the sensor frame, sensor-to-map pose). When `masks`
    is omitted the clouds' own `dynamic` flags are used.
    """
    if masks is not None and len(masks) != len(sweeps):
        raise InputError(f"{len(masks)} masks for {len(sweeps)} sweeps")
    out = []
    for i, (cloud, pose) in enumerate(sweeps):
        mask = cloud.dynamic if masks is None else np.asarray(masks[i], dtype=bool)
        if mask.shape != (len(cloud),):
            raise InputError(f"sweep {i}: mask length {mask.shape} != {len(cloud)} points")
        keep = cloud[~mask]
        out.append(
            keep.replace(
                position=se3_apply(pose, keep.position),
                sensor_origin=np.broadcast_to(pose.translation, (len(keep), 3)),
                dynamic=False,
            )
        )
    return PointCloud.concat(out)


def voxel_keys(position: np.ndarray, voxel_size: float) -> np.ndarray:
    return np.floor(position / voxel_size).astype(np.int64)


def voxel_representatives(position: np.ndarray, voxel_size: float) -> np.ndarray:
    """Indices of one point per occupied voxel, in increasing input order.

    The representative is the point closest to the voxel centre; ties go to the
    lowest input index.
    """
    if voxel_size <= 0:
        raise InputError("voxel_size must be positive")
    n = len(position)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    keys = voxel_keys(position, voxel_size)
    centers = (keys + 0.5) * voxel_size
    d2 = np.sum((position - centers) ** 2, axis=1)
    order = np.lexsort((np.arange(n), d2, keys[:, 2], keys[:, 1], keys[:, 0]))
    k = keys[order]
    first = np.ones(n, dtype=bool)
    first[1:] = np.any(k[1:] != k[:-1], axis=1)
    return np.sort(order[first])


def voxel_downsample(points: PointCloud, voxel_size: float = DEFAULT_VOXEL) -> PointCloud:
    return points[voxel_representatives(points.position, voxel_size)]


def _normals_from_cov(cov: np.ndarray, counts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    w, v = np.linalg.eigh(cov)  # ascending eigenvalues
    normals = v[..., :, 0]
    scale = np.maximum(w[..., 2], np.finfo(float).tiny)
    degenerate = (counts < 3) | ((w[..., 1] - w[..., 0]) <= DEGENERATE_RATIO * scale)
    return normals, degenerate


def estimate_normal(query, neighbors) -> Optional[np.ndarray]:
    """PCA normal of a neighbourhood; None when the neighbourhood is degenerate.

    `query` is accepted for signature symmetry with the batched path; the fit
    uses only `neighbors`.
    """
    nb = np.asarray(neighbors, dtype=np.float64).reshape(-1, 3)
    if len(nb) < 3:
        return None
    c = nb - nb.mean(axis=0)
    cov = c.T @ c / len(nb)
    normals, degenerate = _normals_from_cov(cov[None], np.array([len(nb)]))
    if degenerate[0]:
        return None
    return normals[0]


def estimate_normals(
    queries: np.ndarray,
    cloud: np.ndarray,
    tree: Optional[cKDTree] = None,
    radius: float = NORMAL_RADIUS,
    max_neighbors: int = NORMAL_MAX_NEIGHBORS,
    chunk: int = 4096,
) -> tuple[np.ndarray, np.ndarray]:
    """Batched `estimate_normal` against a reference cloud.

    Returns (normals (N,3), degenerate (N,) bool).
    """
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    if tree is None:
        tree = cKDTree(cloud)
    n = len(queries)
    normals = np.zeros((n, 3))
    degenerate = np.ones(n, dtype=bool)
    k = min(max_neighbors, len(cloud))
    if n == 0 or k == 0:
        return normals, degenerate
    for s in range(0, n, chunk):
        q = queries[s : s + chunk]
        dist, idx = tree.query(q, k=k, distance_upper_bound=radius)
        if k == 1:
            dist, idx = dist[:, None], idx[:, None]
        valid = np.isfinite(dist)
        cnt = valid.sum(axis=1)
        pts = cloud[np.minimum(idx, len(cloud) - 1)]
        pts = np.where(valid[..., None], pts, 0.0)
        denom = np.maximum(cnt, 1)[:, None]
        mean = pts.sum(axis=1) / denom
        c = np.where(valid[..., None], pts - mean[:, None, :], 0.0)
        cov = np.einsum("nki,nkj->nij", c, c) / denom[..., None]
        nrm, deg = _normals_from_cov(cov, cnt)
        normals[s : s + chunk] = nrm
        degenerate[s : s + chunk] = deg
    return normals, degenerate


def surfels_from_points(
    reps: PointCloud, normals: np.ndarray, voxel_size: float
) -> Surfels:
    """Create disks at `reps` and record intensity / range / incidence metadata.

    Normals are flipped to face the recording sensor.
    """
    view = reps.sensor_origin - reps.position
    flip = np.sum(normals * view, axis=1) < 0
    normals = np.where(flip[:, None], -normals, normals)
    rng = np.linalg.norm(view, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        ray_dir = -view / rng[:, None]
    inc = np.where(rng > 0, incidence_angle(ray_dir, normals), 0.0)
    return Surfels(
        reps.position,
        normals,
        np.full(len(reps), disk_radius(voxel_size)),
        np.clip(reps.intensity, 0.0, 1.0),
        rng,
        inc,
        reps.semantic,
    )


def build_surfels(points: PointCloud, voxel_size: float = DEFAULT_VOXEL) -> SurfelMap:
    """Downsample, fit normals against the full cloud, and emit one disk per voxel."""
    if len(points) == 0:
        return SurfelMap(Surfels.empty(), voxel_size)
    reps = voxel_downsample(points, voxel_size)
    normals, degenerate = estimate_normals(reps.position, points.position)
    keep = ~degenerate
    surfels = surfels_from_points(reps[keep], normals[keep], voxel_size)
    return SurfelMap(surfels, voxel_size, n_degenerate=int(degenerate.sum()))
