"""64 x 2048 polar feature grids: simulated hits in, real sweeps binned, points out."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InputError
from .geometry import Pose
from .points import PointCloud
from .raycast.engine import HitImage
from .raycast.sensor import RayGrid, SensorIntrinsics

N_CHANNELS = 8
CH_RANGE, CH_INTENSITY, CH_INCIDENCE, CH_ORIG_RANGE, CH_ORIG_INCIDENCE, CH_LASER, CH_SEMANTIC, CH_OCCUPANCY = range(8)
CHANNEL_NAMES = (
    "range", "orig_intensity", "incidence", "orig_range", "orig_incidence",
    "laser_id", "semantic", "occupancy",
)


def project(hits: HitImage) -> np.ndarray:
    """Fill the (8, rows, cols) feature grid from a hit image."""
    rows, cols = hits.shape
    occ = hits.occupied
    g = np.zeros((N_CHANNELS, rows, cols))
    g[CH_RANGE] = np.where(occ, hits.range, 0.0)
    g[CH_INTENSITY] = np.where(occ, hits.orig_intensity, 0.0)
    g[CH_INCIDENCE] = np.where(occ, hits.incidence, 0.0)
    g[CH_ORIG_RANGE] = np.where(occ, hits.orig_range, 0.0)
    g[CH_ORIG_INCIDENCE] = np.where(occ, hits.orig_incidence, 0.0)
    g[CH_LASER] = np.arange(rows, dtype=np.float64)[:, None]
    g[CH_SEMANTIC] = np.where(occ, hits.semantic, 0)
    g[CH_OCCUPANCY] = occ
    return g


def check_grid(grid: np.ndarray) -> None:
    """Raise InputError unless `grid` satisfies the channel invariants."""
    if grid.ndim != 3 or grid.shape[0] != N_CHANNELS:
        raise InputError(f"feature grid must have shape (8, rows, cols), got {grid.shape}")
    occ = grid[CH_OCCUPANCY]
    if not np.all((occ == 0) | (occ == 1)):
        raise InputError("occupancy channel must be binary")
    empty = occ == 0
    if np.any(grid[:CH_LASER][:, empty] != 0):
        raise InputError("real-valued channels must be zero at empty cells")
    if np.any(grid[CH_LASER] != np.arange(grid.shape[1])[:, None]):
        raise InputError("laser_id channel must equal the row index")


@dataclass
class BinnedSweep:
    occupancy: np.ndarray  # (rows, cols) uint8
    range: np.ndarray  # nearest range per cell, 0 where empty
    point_index: np.ndarray  # source point per cell, -1 where empty
    collisions: int


def azimuth_columns(phi: np.ndarray, intr: SensorIntrinsics) -> np.ndarray:
    """Column whose firing azimuth is nearest to each angle (cells centred on rays)."""
    n = intr.n_cols
    rel = intr.spin_direction * (np.asarray(phi, dtype=np.float64) - intr.azimuth_start)
    frac = np.mod(rel, 2.0 * math.pi) / (2.0 * math.pi)
    return np.floor(frac * n + 0.5).astype(np.int64) % n


def bin_real_sweep(points: PointCloud, intr: SensorIntrinsics, sweep_start: float = 0.0,
                   sensor_pose: Optional[Pose] = None) -> BinnedSweep:
    """Map a real sweep onto the polar grid (row = laser id, column = azimuth).

    Positions are taken in the sensor frame at sweep start; pass `sensor_pose`
    (sensor-to-map) when they are in the map frame. When two points share a
    cell the nearer one is kept and a collision is counted. `sweep_start` is
    accepted for interface symmetry; no per-point motion compensation is done.
    """
    lid = points.laser_id
    if len(points) and (np.any(lid < 0) or np.any(lid >= intr.n_beams)):
        raise InputError("every point needs a laser_id in [0, n_beams)")
    p = points.position
    if sensor_pose is not None:
        p = sensor_pose.inverse().apply(p)
    rng = np.linalg.norm(p, axis=1)
    col = azimuth_columns(np.arctan2(p[:, 1], p[:, 0]), intr)
    cell = lid.astype(np.int64) * intr.n_cols + col
    n_cells = intr.n_beams * intr.n_cols
    # nearest point per cell; ties resolved by lowest point index
    order = np.lexsort((np.arange(len(p)), rng, cell))
    first = np.ones(len(order), dtype=bool)
    first[1:] = cell[order[1:]] != cell[order[:-1]]
    winners = order[first]
    occ = np.zeros(n_cells, np.uint8)
    rgrid = np.zeros(n_cells)
    idx = np.full(n_cells, -1, np.int64)
    occ[cell[winners]] = 1
    rgrid[cell[winners]] = rng[winners]
    idx[cell[winners]] = winners
    shape = intr.shape
    return BinnedSweep(occ.reshape(shape), rgrid.reshape(shape), idx.reshape(shape), int(len(p) - len(winners)))


def to_pointcloud(grid: np.ndarray, keep: np.ndarray, rays: RayGrid) -> PointCloud:
    """Emit origin + range * direction for every kept cell."""
    keep = np.asarray(keep).astype(bool)
    occ = grid[CH_OCCUPANCY] != 0
    if keep.shape != occ.shape:
        raise InputError(f"keep mask shape {keep.shape} != grid {occ.shape}")
    if np.any(keep & ~occ):
        raise InputError("keep mask selects cells with no return")
    r, c = np.nonzero(keep)
    rng = grid[CH_RANGE][r, c]
    o = rays.origins[r, c]
    d = rays.directions[r, c]
    return PointCloud(
        o + rng[:, None] * d,
        grid[CH_INTENSITY][r, c],
        r,
        rays.sweep_start + rays.time_offset[c],
        grid[CH_SEMANTIC][r, c].astype(np.uint8),
        o,
        False,
    )
