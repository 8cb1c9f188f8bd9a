"""Point containers shared by mapping, object building and the polar grid."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .geometry import Pose, se3_apply

N_LASERS = 64


class PointSample(NamedTuple):
    position: np.ndarray
    intensity: float
    laser_id: int
    timestamp: float
    semantic_class: int
    sensor_origin: np.ndarray
    dynamic: bool


@dataclass
class PointCloud:
    """Struct-of-arrays collection of `PointSample`s.

    `laser_id` may be -1 for points whose beam is unknown.
    """

    position: np.ndarray
    intensity: np.ndarray
    laser_id: np.ndarray
    timestamp: np.ndarray
    semantic: np.ndarray
    sensor_origin: np.ndarray
    dynamic: np.ndarray

    FIELDS = ("position", "intensity", "laser_id", "timestamp", "semantic", "sensor_origin", "dynamic")

    def __post_init__(self):
        self.position = np.ascontiguousarray(self.position, dtype=np.float64).reshape(-1, 3)
        n = len(self.position)
        self.intensity = _col(self.intensity, n, np.float64)
        self.laser_id = _col(self.laser_id, n, np.int16)
        self.timestamp = _col(self.timestamp, n, np.float64)
        self.semantic = _col(self.semantic, n, np.uint8)
        so = np.asarray(self.sensor_origin, dtype=np.float64)
        self.sensor_origin = np.ascontiguousarray(np.broadcast_to(so, (n, 3)))
        self.dynamic = _col(self.dynamic, n, bool)

    @classmethod
    def from_positions(cls, position, intensity=0.5, laser_id=-1, timestamp=0.0,
                       semantic=1, sensor_origin=(0.0, 0.0, 0.0), dynamic=False) -> "PointCloud":
        return cls(position, intensity, laser_id, timestamp, semantic, sensor_origin, dynamic)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls.from_positions(np.zeros((0, 3)))

    @classmethod
    def concat(cls, clouds: list["PointCloud"]) -> "PointCloud":
        clouds = [c for c in clouds if len(c)]
        if not clouds:
            return cls.empty()
        return cls(*(np.concatenate([getattr(c, f) for c in clouds]) for f in cls.FIELDS))

    def __len__(self) -> int:
        return len(self.position)

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return PointSample(
                self.position[idx].copy(),
                float(self.intensity[idx]),
                int(self.laser_id[idx]),
                float(self.timestamp[idx]),
                int(self.semantic[idx]),
                self.sensor_origin[idx].copy(),
                bool(self.dynamic[idx]),
            )
        return PointCloud(*(getattr(self, f)[idx] for f in self.FIELDS))

    def copy(self) -> "PointCloud":
        return PointCloud(*(getattr(self, f).copy() for f in self.FIELDS))

    def replace(self, **kw) -> "PointCloud":
        vals = {f: getattr(self, f) for f in self.FIELDS}
        vals.update(kw)
        return PointCloud(**vals)

    def transformed(self, pose: Pose) -> "PointCloud":
        """Move both the points and their recording sensor origins."""
        return self.replace(
            position=se3_apply(pose, self.position),
            sensor_origin=se3_apply(pose, self.sensor_origin),
        )


def _col(v, n, dtype):
    a = np.asarray(v, dtype=dtype)
    if a.ndim == 0:
        return np.full(n, a, dtype=dtype)
    return np.ascontiguousarray(a.reshape(n))
