"""Rigid dynamic-object assets built from boxed snippets, and bank retrieval."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyObjectError, FormatError, InputError, QualityError, ResolutionError
from .geometry import Pose, Surfels, matrix_to_rpy, rot_z, wrap_angle
from .io import atomic_write, decode_surfels, encode_surfels, read_surfels
from .mapping import DEFAULT_VOXEL, build_surfels
from .points import PointCloud

INTENSITY_SIGMA = 0.1
ICP_MAX_ITERS = 50
ICP_TOL = 1e-6
OUTLIER_RADIUS = 0.1
OUTLIER_MIN_NEIGHBORS = 4
MIN_OBJECT_POINTS = 50
FITNESS_LAMBDA = 0.5
TOP_K = 5


@dataclass(frozen=True)
class BoxLabel:
    center: np.ndarray
    heading: float
    dims: tuple[float, float, float]
    timestamp: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "dims", tuple(float(d) for d in self.dims))
        object.__setattr__(self, "heading", float(wrap_angle(self.heading)))
        if min(self.dims) <= 0:
            raise InputError("box dims must be positive")

    @property
    def pose(self) -> Pose:
        """Object-to-map transform."""
        return Pose(rot_z(self.heading), self.center)

    def contains(self, local: np.ndarray) -> np.ndarray:
        half = np.asarray(self.dims) / 2.0
        return np.all(np.abs(local) <= half, axis=1)

    @classmethod
    def from_json(cls, d: dict) -> "BoxLabel":
        try:
            return cls(d["center"], d["heading"], tuple(d["dims"]), float(d.get("t", 0.0)))
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"bad box label: {e}") from e


@dataclass
class ObjectAsset:
    """Surfels in the object frame: origin at the box centre, +x along the heading."""

    surfels: Surfels
    dims: tuple[float, float, float]
    source_id: str
    rel_orientation: float = 0.0

    def within_box(self, slack: float = 0.1) -> bool:
        if len(self.surfels) == 0:
            return True
        half = np.asarray(self.dims) * (1.0 + slack) / 2.0
        return bool(np.all(np.abs(self.surfels.center) <= half))

    def index_entry(self) -> dict:
        return {
            "source_id": self.source_id,
            "dims": [float(d) for d in self.dims],
            "rel_orientation": float(self.rel_orientation),
            "surfel_count": len(self.surfels),
        }


def accumulate_object(sweeps: Sequence[tuple[PointCloud, Pose]], labels: Sequence[BoxLabel]) -> PointCloud:
    """Collect in-box points of every sweep, expressed in that sweep's box frame.

    Each sweep is (points in the sensor frame, sensor-to-map pose) and pairs
    with the label at the same position in `labels`.
    """
    if len(sweeps) != len(labels):
        raise InputError(f"{len(labels)} labels for {len(sweeps)} sweeps")
    parts = [accumulate_sweep(cloud, pose, label) for (cloud, pose), label in zip(sweeps, labels)]
    out = PointCloud.concat(parts)
    if len(out) == 0:
        raise EmptyObjectError("no points fell inside any box")
    return out


def accumulate_sweep(cloud: PointCloud, pose: Pose, label: BoxLabel) -> PointCloud:
    to_obj = label.pose.inverse().compose(pose)
    local = to_obj.apply(cloud.position)
    inside = label.contains(local)
    sel = cloud[inside]
    return sel.replace(
        position=local[inside],
        sensor_origin=np.broadcast_to(to_obj.translation, (len(sel), 3)),
    )


def mirror_symmetry(points: PointCloud) -> PointCloud:
    """Append the reflection y -> -y of every point (and of its sensor origin)."""
    flip = np.array([1.0, -1.0, 1.0])
    mirrored = points.replace(position=points.position * flip, sensor_origin=points.sensor_origin * flip)
    return PointCloud.concat([points, mirrored]) if len(points) else points.copy()


@dataclass
class IcpResult:
    pose: Pose
    converged: bool
    iterations: int
    rmse: float


def weighted_kabsch(src: np.ndarray, dst: np.ndarray, w: np.ndarray) -> Pose:
    """Rigid transform minimising sum w_i |R src_i + t - dst_i|^2."""
    W = w.sum()
    if W <= 0:
        return Pose()
    mu_s = (w[:, None] * src).sum(axis=0) / W
    mu_d = (w[:, None] * dst).sum(axis=0) / W
    H = ((src - mu_s) * w[:, None]).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ D @ U.T
    return Pose(R, mu_d - R @ mu_s)


def _rotation_angle(R: np.ndarray) -> float:
    return math.acos(max(-1.0, min(1.0, (np.trace(R) - 1.0) / 2.0)))


def icp_refine(source: np.ndarray, target: np.ndarray, source_intensity=None, target_intensity=None,
               max_iters: int = ICP_MAX_ITERS, tol: float = ICP_TOL, sigma: float = INTENSITY_SIGMA,
               init: Optional[Pose] = None, use_intensity: bool = True) -> IcpResult:
    """Intensity-weighted point-to-point ICP aligning `source` onto `target`.

    Correspondences are geometric nearest neighbours; each pair is weighted by
    exp(-(intensity difference)^2 / sigma^2). Stops once an update moves less
    than `tol` in both translation (m) and rotation (rad). If `max_iters` is
    hit first the lowest-residual pose seen is returned with converged=False.
    """
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if len(src) < 10 or len(dst) < 10:
        raise InputError("ICP needs at least 10 points per cloud")
    si = np.zeros(len(src)) if source_intensity is None else np.asarray(source_intensity, dtype=np.float64)
    ti = np.zeros(len(dst)) if target_intensity is None else np.asarray(target_intensity, dtype=np.float64)
    tree = cKDTree(dst)
    T = init or Pose()
    best = (np.inf, T)
    for it in range(1, max_iters + 1):
        moved = T.apply(src)
        d, nn = tree.query(moved)
        if use_intensity:
            w = np.exp(-((si - ti[nn]) ** 2) / sigma**2)
        else:
            w = np.ones(len(src))
        err = float(np.sqrt(np.sum(w * d * d) / max(w.sum(), 1e-300)))
        if err < best[0]:
            best = (err, T)
        dT = weighted_kabsch(moved, dst[nn], w)
        T = dT.compose(T)
        if np.linalg.norm(dT.translation) < tol and _rotation_angle(dT.rotation) < tol:
            d, nn = tree.query(T.apply(src))
            return IcpResult(T, True, it, float(np.sqrt(np.mean(d * d))))
    d, _ = tree.query(T.apply(src))
    final = float(np.sqrt(np.mean(d * d)))
    if final <= best[0]:
        return IcpResult(T, False, max_iters, final)
    d, _ = tree.query(best[1].apply(src))
    return IcpResult(best[1], False, max_iters, float(np.sqrt(np.mean(d * d))))


def remove_outliers(points: PointCloud, radius: float = OUTLIER_RADIUS,
                    min_neighbors: int = OUTLIER_MIN_NEIGHBORS) -> PointCloud:
    """Drop points with fewer than `min_neighbors` other points within `radius`."""
    if len(points) == 0:
        return points
    tree = cKDTree(points.position)
    counts = tree.query_ball_point(points.position, radius, return_length=True) - 1
    return points[counts >= min_neighbors]


def meshify_object(points: PointCloud, dims=None, source_id: str = "", rel_orientation: float = 0.0,
                   voxel_size: float = DEFAULT_VOXEL) -> ObjectAsset:
    """Outlier-filter an object-frame cloud and turn it into a surfel asset."""
    clean = remove_outliers(points)
    if len(clean) < MIN_OBJECT_POINTS:
        raise QualityError(f"only {len(clean)} points survive outlier removal (need {MIN_OBJECT_POINTS})")
    smap = build_surfels(clean, voxel_size)
    if len(smap) == 0:
        raise QualityError("no surfel survived normal estimation")
    if dims is None:
        lo, hi = smap.surfels.bounds()
        dims = tuple(float(v) for v in 2.0 * np.maximum(np.abs(lo), np.abs(hi)))
    return ObjectAsset(smap.surfels, tuple(float(d) for d in dims), source_id, float(rel_orientation))


def build_object(sweeps: Sequence[tuple[PointCloud, Pose]], labels: Sequence[BoxLabel], source_id: str,
                 voxel_size: float = DEFAULT_VOXEL) -> tuple[ObjectAsset, list[IcpResult]]:
    """accumulate -> mirror -> ICP each later sweep onto the earlier ones -> meshify."""
    if len(sweeps) != len(labels):
        raise InputError(f"{len(labels)} labels for {len(sweeps)} sweeps")
    per_sweep = [mirror_symmetry(accumulate_sweep(c, p, l)) for (c, p), l in zip(sweeps, labels)]
    if sum(len(c) for c in per_sweep) == 0:
        raise EmptyObjectError("no points fell inside any box")
    acc = per_sweep[0]
    reports = []
    for cloud in per_sweep[1:]:
        if len(cloud) >= 10 and len(acc) >= 10:
            res = icp_refine(cloud.position, acc.position, cloud.intensity, acc.intensity)
            reports.append(res)
            cloud = cloud.transformed(res.pose)
        acc = PointCloud.concat([acc, cloud])
    first_pose = sweeps[0][1]
    sensor_yaw = matrix_to_rpy(first_pose.rotation)[2]
    rel = float(wrap_angle(labels[0].heading - sensor_yaw))
    asset = meshify_object(acc, labels[0].dims, source_id, rel, voxel_size)
    return asset, reports


def fitness(asset: ObjectAsset, query_dims, rel_orientation: float, lam: float = FITNESS_LAMBDA) -> float:
    dq = np.asarray(query_dims, dtype=np.float64) - np.asarray(asset.dims, dtype=np.float64)
    return -(float(np.linalg.norm(dq)) + lam * abs(float(wrap_angle(rel_orientation - asset.rel_orientation))))


def rank_objects(bank: Sequence[ObjectAsset], query_dims, rel_orientation: float,
                 lam: float = FITNESS_LAMBDA) -> list[int]:
    """Bank indices by descending fitness; equal scores keep bank order."""
    scores = [fitness(a, query_dims, rel_orientation, lam) for a in bank]
    return sorted(range(len(bank)), key=lambda i: (-scores[i], i))


def select_object(bank: Sequence[ObjectAsset], query_dims, rel_orientation: float, k: int = TOP_K,
                  seed: int = 0, lam: float = FITNESS_LAMBDA) -> ObjectAsset:
    """Uniformly pick one of the k best-fitting assets (seeded)."""
    bank = list(bank)
    if not bank:
        raise InputError("object bank is empty")
    if k < 1:
        raise InputError("k must be at least 1")
    top = rank_objects(bank, query_dims, rel_orientation, lam)[:k]
    if len(top) == 1:
        return bank[top[0]]
    pick = int(np.random.default_rng(seed).integers(len(top)))
    return bank[top[pick]]


@dataclass
class ObjectBank:
    """Directory of `<source_id>.lsrf` assets plus `index.json`."""

    root: Path
    entries: dict[str, dict] = field(default_factory=dict)
    _assets: dict[str, ObjectAsset] = field(default_factory=dict, repr=False)

    INDEX = "index.json"

    @classmethod
    def open(cls, root, create: bool = False) -> "ObjectBank":
        root = Path(root)
        if not root.is_dir():
            if not create:
                raise ResolutionError(f"bank directory {root} does not exist")
            root.mkdir(parents=True)
        idx = root / cls.INDEX
        entries = {}
        if idx.exists():
            try:
                for e in json.loads(idx.read_text()):
                    entries[e["source_id"]] = e
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise FormatError(f"{idx}: bad bank index: {e}") from e
        return cls(root, entries)

    def __contains__(self, asset_id: str) -> bool:
        return asset_id in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self.entries))

    def __getitem__(self, asset_id: str) -> ObjectAsset:
        if asset_id not in self.entries:
            raise KeyError(asset_id)
        if asset_id not in self._assets:
            e = self.entries[asset_id]
            self._assets[asset_id] = ObjectAsset(
                read_surfels(self.root / f"{asset_id}.lsrf"), tuple(e["dims"]), asset_id,
                float(e.get("rel_orientation", 0.0)))
        return self._assets[asset_id]

    def assets(self) -> list[ObjectAsset]:
        return [self[k] for k in self]

    def add(self, asset: ObjectAsset) -> None:
        if not asset.source_id or "/" in asset.source_id:
            raise InputError(f"invalid source_id {asset.source_id!r}")
        buf = encode_surfels(asset.surfels)
        atomic_write(self.root / f"{asset.source_id}.lsrf", buf)
        self.entries[asset.source_id] = asset.index_entry()
        # keep the stored (float32) precision so later lookups match a fresh open
        self._assets[asset.source_id] = ObjectAsset(decode_surfels(buf), asset.dims, asset.source_id,
                                                    asset.rel_orientation)
        index = [self.entries[k] for k in sorted(self.entries)]
        atomic_write(self.root / self.INDEX, json.dumps(index, indent=2).encode())
