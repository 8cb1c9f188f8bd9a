"""Rigid transforms, surfel containers and the ray/disk intersection primitive."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import NamedTuple, Optional

import numpy as np

DEFAULT_T_MIN = 0.1
PARALLEL_EPS = 1e-9


class SemanticClass(IntEnum):
    """Per-point / per-surfel label. Zero is reserved for "no return"."""

    EMPTY = 0
    BACKGROUND = 1
    ROAD = 2
    VEHICLE = 3


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rpy_to_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Z-Y-X (yaw, then pitch, then roll) Euler angles to a rotation matrix."""
    return rot_z(yaw) @ rot_y(pitch) @ rot_x(roll)


def matrix_to_rpy(R: np.ndarray) -> tuple[float, float, float]:
    pitch = math.asin(max(-1.0, min(1.0, -R[2, 0])))
    roll = math.atan2(R[2, 1], R[2, 2])
    yaw = math.atan2(R[1, 0], R[0, 0])
    return roll, pitch, yaw


def wrap_angle(a):
    """Wrap to [-pi, pi)."""
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


@dataclass(frozen=True)
class Pose:
    """Rigid transform p -> R @ p + t."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_xyz_rpy(cls, xyz, rpy) -> "Pose":
        return cls(rpy_to_matrix(*rpy), np.asarray(xyz, dtype=np.float64))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply `other` first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def apply(self, p: np.ndarray) -> np.ndarray:
        return se3_apply(self, p)

    def rotate(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v, dtype=np.float64) @ self.rotation.T

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return bool(
            np.all(np.isfinite(R))
            and np.all(np.isfinite(self.translation))
            and np.allclose(R.T @ R, np.eye(3), atol=tol, rtol=0)
            and abs(np.linalg.det(R) - 1.0) <= tol
        )


def se3_apply(pose: Pose, p: np.ndarray) -> np.ndarray:
    """Apply `pose` to a point or an (N, 3) array of points."""
    p = np.asarray(p, dtype=np.float64)
    return p @ pose.rotation.T + pose.translation


def unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / n


def incidence_angle(direction, normal):
    """Angle between a ray and an (unoriented) surface normal, in [0, pi/2].

    Works on single vectors or on broadcastable (..., 3) arrays.
    """
    d = np.asarray(direction, dtype=np.float64)
    n = np.asarray(normal, dtype=np.float64)
    c = np.abs(np.sum(d * n, axis=-1))
    return np.arccos(np.minimum(c, 1.0))


@dataclass(frozen=True)
class Surfel:
    center: np.ndarray
    normal: np.ndarray
    radius: float
    orig_intensity: float = 0.0
    orig_range: float = 0.0
    orig_incidence: float = 0.0
    semantic_class: SemanticClass = SemanticClass.BACKGROUND


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    time_offset: float = 0.0
    laser_row: int = 0
    azimuth_col: int = 0


class Hit(NamedTuple):
    range: float
    point: np.ndarray
    surfel_index: int
    incidence: float


def ray_disk_intersect(
    ray: Ray, surfel: Surfel, t_min: float = DEFAULT_T_MIN, surfel_index: int = 0
) -> Optional[Hit]:
    """Intersect a ray with a surfel disk; None on a miss.

    The disk is treated as two-sided, so flipping its normal gives the same hit.
    """
    o = np.asarray(ray.origin, dtype=np.float64)
    d = np.asarray(ray.direction, dtype=np.float64)
    c = np.asarray(surfel.center, dtype=np.float64)
    n = np.asarray(surfel.normal, dtype=np.float64)
    denom = d[0] * n[0] + d[1] * n[1] + d[2] * n[2]
    if abs(denom) < PARALLEL_EPS:
        return None
    w = c - o
    t = (w[0] * n[0] + w[1] * n[1] + w[2] * n[2]) / denom
    if not t > t_min:
        return None
    p = o + t * d
    q = p - c
    if q[0] * q[0] + q[1] * q[1] + q[2] * q[2] > surfel.radius * surfel.radius:
        return None
    return Hit(float(t), p, surfel_index, float(math.acos(min(abs(denom), 1.0))))


@dataclass
class Surfels:
    """Struct-of-arrays surfel collection."""

    center: np.ndarray
    normal: np.ndarray
    radius: np.ndarray
    orig_intensity: np.ndarray
    orig_range: np.ndarray
    orig_incidence: np.ndarray
    semantic: np.ndarray

    def __post_init__(self):
        self.center = np.ascontiguousarray(self.center, dtype=np.float64).reshape(-1, 3)
        n = len(self.center)
        self.normal = np.ascontiguousarray(self.normal, dtype=np.float64).reshape(n, 3)
        for name in ("radius", "orig_intensity", "orig_range", "orig_incidence"):
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float64).reshape(n))
        self.semantic = np.ascontiguousarray(self.semantic, dtype=np.uint8).reshape(n)

    @classmethod
    def empty(cls) -> "Surfels":
        z = np.zeros(0)
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), z, z, z, z, np.zeros(0, np.uint8))

    @classmethod
    def from_list(cls, surfels: list[Surfel]) -> "Surfels":
        if not surfels:
            return cls.empty()
        return cls(
            np.array([s.center for s in surfels]),
            np.array([s.normal for s in surfels]),
            np.array([s.radius for s in surfels]),
            np.array([s.orig_intensity for s in surfels]),
            np.array([s.orig_range for s in surfels]),
            np.array([s.orig_incidence for s in surfels]),
            np.array([int(s.semantic_class) for s in surfels]),
        )

    @classmethod
    def concat(cls, parts: list["Surfels"]) -> "Surfels":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(
            *(np.concatenate([getattr(p, f) for p in parts]) for f in cls._fields())
        )

    @staticmethod
    def _fields():
        return ("center", "normal", "radius", "orig_intensity", "orig_range", "orig_incidence", "semantic")

    def __len__(self) -> int:
        return len(self.center)

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return Surfel(
                self.center[idx].copy(),
                self.normal[idx].copy(),
                float(self.radius[idx]),
                float(self.orig_intensity[idx]),
                float(self.orig_range[idx]),
                float(self.orig_incidence[idx]),
                SemanticClass(int(self.semantic[idx])),
            )
        return Surfels(*(getattr(self, f)[idx] for f in self._fields()))

    def transformed(self, pose: Pose) -> "Surfels":
        """Rigidly move geometry; recorded metadata is left untouched."""
        return Surfels(
            se3_apply(pose, self.center),
            pose.rotate(self.normal),
            self.radius,
            self.orig_intensity,
            self.orig_range,
            self.orig_incidence,
            self.semantic,
        )

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.center.min(axis=0), self.center.max(axis=0)

    def equals(self, other: "Surfels") -> bool:
        return len(self) == len(other) and all(
            np.array_equal(getattr(self, f), getattr(other, f)) for f in self._fields()
        )
