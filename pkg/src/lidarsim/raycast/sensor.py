"""Spinning-LiDAR intrinsics and rolling-shutter ray generation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import FormatError
from ..scene import Trajectory, interpolate_pose, velocity_at

N_BEAMS = 64
N_COLS = 2048
SWEEP_PERIOD = 0.1
N_ACTOR_INTERVALS = 360


def default_elevations(n_beams: int = N_BEAMS) -> np.ndarray:
    """HDL-64E-like vertical FOV: +2.0 deg down to -24.9 deg, evenly spaced."""
    return np.radians(np.linspace(2.0, -24.9, n_beams))


@dataclass(frozen=True)
class SensorIntrinsics:
    n_beams: int = N_BEAMS
    n_cols: int = N_COLS
    elevation_table: np.ndarray = field(default_factory=default_elevations)
    azimuth_start: float = 0.0
    spin_direction: int = 1
    sweep_period: float = SWEEP_PERIOD

    def __post_init__(self):
        el = np.asarray(self.elevation_table, dtype=np.float64).reshape(-1)
        if len(el) != self.n_beams:
            raise ValueError(f"elevation table has {len(el)} entries, expected {self.n_beams}")
        d = np.diff(el)
        if not (np.all(d > 0) or np.all(d < 0)):
            raise ValueError("elevation table must be strictly monotone")
        if self.spin_direction not in (1, -1):
            raise ValueError("spin_direction must be +1 or -1")
        if not self.sweep_period > 0:
            raise ValueError("sweep_period must be positive")
        el.flags.writeable = False
        object.__setattr__(self, "elevation_table", el)

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_beams, self.n_cols

    def column_times(self) -> np.ndarray:
        """Firing time of each column relative to sweep start."""
        j = np.arange(self.n_cols, dtype=np.float64)
        return (j / self.n_cols) * self.sweep_period

    def column_azimuths(self) -> list[float]:
        a0, s, n = self.azimuth_start, self.spin_direction, self.n_cols
        return [a0 + s * 2.0 * math.pi * j / n for j in range(n)]

    def column_intervals(self, n_intervals: int = N_ACTOR_INTERVALS) -> np.ndarray:
        """Index of the actor-pose interval each column falls in."""
        return (np.arange(self.n_cols, dtype=np.int64) * n_intervals) // self.n_cols


def load_intrinsics_csv(path, **overrides) -> SensorIntrinsics:
    """Read `beam_id,elevation_deg` rows (optional header) into intrinsics."""
    rows = []
    try:
        with open(path, newline="") as f:
            for rec in csv.reader(f):
                if not rec or rec[0].strip().startswith("#"):
                    continue
                try:
                    rows.append((int(rec[0]), float(rec[1])))
                except ValueError:
                    if rows:
                        raise
    except (OSError, ValueError, IndexError) as e:
        raise FormatError(f"{path}: cannot read intrinsics: {e}") from e
    rows.sort()
    if [r[0] for r in rows] != list(range(len(rows))):
        raise FormatError(f"{path}: beam ids must be 0..n-1")
    el = np.radians([r[1] for r in rows])
    try:
        return SensorIntrinsics(n_beams=len(rows), elevation_table=el, **overrides)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from e


def save_intrinsics_csv(intr: SensorIntrinsics, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["beam_id", "elevation_deg"])
        for i, e in enumerate(intr.elevation_table):
            w.writerow([i, repr(float(np.degrees(e)))])


@dataclass(frozen=True)
class RayGrid:
    """Per-cell ray origins/directions for one sweep, shape (rows, cols, 3)."""

    origins: np.ndarray
    directions: np.ndarray
    time_offset: np.ndarray  # (cols,)
    sweep_start: float
    start_rotation: np.ndarray
    start_translation: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.origins.shape[:2]

    def timestamps(self) -> np.ndarray:
        """Absolute firing time per cell."""
        return np.broadcast_to(self.sweep_start + self.time_offset, self.shape)


def generate_rays(intr: SensorIntrinsics, sdv_traj: Trajectory, sweep_start: float,
                  compensate_rotation: bool = False) -> RayGrid:
    """Rays for one sweep with ego translation applied per column.

    Column j fires at (j / n_cols) * period after `sweep_start`; its origin is
    c0 + dt * v0 and its direction R0 @ [cos(el) cos(az), cos(el) sin(az), sin(el)],
    where c0, R0, v0 are the sensor pose and velocity at sweep start. With
    `compensate_rotation` the rotation is re-evaluated at each column's time.
    """
    start = interpolate_pose(sdv_traj, sweep_start)
    c0 = start.translation
    v0 = velocity_at(sdv_traj, sweep_start)
    dt = intr.column_times()
    origins_c = c0[None, :] + dt[:, None] * v0[None, :]

    az = intr.column_azimuths()
    cos_az = np.array([math.cos(a) for a in az])
    sin_az = np.array([math.sin(a) for a in az])
    el = intr.elevation_table
    cos_el = np.array([math.cos(e) for e in el])
    sin_el = np.array([math.sin(e) for e in el])
    lx = cos_el[:, None] * cos_az[None, :]
    ly = cos_el[:, None] * sin_az[None, :]
    lz = np.broadcast_to(sin_el[:, None], lx.shape)

    if compensate_rotation:
        Rs = np.array([interpolate_pose(sdv_traj, sweep_start + t).rotation for t in dt])
        R = [[Rs[None, :, i, k] for k in range(3)] for i in range(3)]
    else:
        R0 = start.rotation
        R = [[R0[i, k] for k in range(3)] for i in range(3)]
    dirs = np.empty((intr.n_beams, intr.n_cols, 3))
    for i in range(3):
        dirs[..., i] = R[i][0] * lx + R[i][1] * ly + R[i][2] * lz
    origins = np.ascontiguousarray(np.broadcast_to(origins_c[None], dirs.shape))
    return RayGrid(origins, dirs, dt, float(sweep_start), start.rotation, c0)
