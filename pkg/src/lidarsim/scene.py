"""Trajectories, scenario files and scene composition."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import FormatError, InputError, ResolutionError
from .geometry import Pose, Surfels, matrix_to_rpy, rpy_to_matrix
from .mapping import SurfelMap

DEFAULT_SWEEP_PERIOD = 0.1
DEFAULT_EXCLUSION_BOX = (5.0, 2.5, 2.2)


class TrajectoryClampWarning(UserWarning):
    pass


class OutOfBoundsWarning(UserWarning):
    pass


def _rotation_log(R: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix (angle in [0, pi])."""
    c = max(-1.0, min(1.0, (np.trace(R) - 1.0) / 2.0))
    angle = math.acos(c)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < 1e-12:
        return 0.5 * w
    s = math.sin(angle)
    if s > 1e-6:
        return w * (angle / (2.0 * s))
    # near pi: axis from the symmetric part
    B = (R + np.eye(3)) / 2.0
    axis = np.sqrt(np.maximum(np.diag(B), 0.0))
    i = int(np.argmax(axis))
    axis[i] = math.sqrt(B[i, i])
    for j in range(3):
        if j != i:
            axis[j] = B[i, j] / axis[i]
    return axis / np.linalg.norm(axis) * angle


def _rotation_exp(w: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(w))
    K = np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])
    if angle < 1e-12:
        return np.eye(3) + K
    K = K / angle
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)


@dataclass(frozen=True)
class Trajectory:
    """Time-stamped poses; timestamps strictly increasing."""

    times: np.ndarray
    rotations: np.ndarray
    translations: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64).reshape(-1)
        R = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 3, 3)
        x = np.asarray(self.translations, dtype=np.float64).reshape(-1, 3)
        if len(t) == 0:
            raise InputError("trajectory needs at least one sample")
        if not (len(t) == len(R) == len(x)):
            raise InputError("trajectory arrays disagree in length")
        if np.any(np.diff(t) <= 0):
            raise InputError("trajectory timestamps must be strictly increasing")
        for a in (t, R, x):
            a.flags.writeable = False
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "rotations", R)
        object.__setattr__(self, "translations", x)

    @classmethod
    def from_poses(cls, samples: Sequence[tuple[float, Pose]]) -> "Trajectory":
        if not samples:
            raise InputError("trajectory needs at least one sample")
        return cls(
            np.array([s[0] for s in samples]),
            np.array([s[1].rotation for s in samples]),
            np.array([s[1].translation for s in samples]),
        )

    @classmethod
    def static(cls, pose: Pose, t: float = 0.0) -> "Trajectory":
        return cls.from_poses([(t, pose)])

    @classmethod
    def linear(cls, start: Pose, velocity, t0: float, t1: float) -> "Trajectory":
        """Constant-velocity, constant-orientation motion between t0 and t1."""
        v = np.asarray(velocity, dtype=np.float64)
        end = Pose(start.rotation, start.translation + (t1 - t0) * v)
        return cls.from_poses([(t0, start), (t1, end)])

    def __len__(self) -> int:
        return len(self.times)

    def pose(self, i: int) -> Pose:
        return Pose(self.rotations[i], self.translations[i])

    def covers(self, t: float) -> bool:
        return bool(self.times[0] <= t <= self.times[-1])

    def _segment(self, t: float) -> int:
        # index i of the segment [times[i], times[i+1]] used for t
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        return min(max(i, 0), len(self.times) - 2)

    def to_json(self) -> list[dict]:
        out = []
        for i in range(len(self)):
            out.append(
                {
                    "t": float(self.times[i]),
                    "xyz": [float(v) for v in self.translations[i]],
                    "rpy": [float(v) for v in matrix_to_rpy(self.rotations[i])],
                }
            )
        return out

    @classmethod
    def from_json(cls, samples: list[dict]) -> "Trajectory":
        try:
            return cls.from_poses(
                [(float(s["t"]), Pose(rpy_to_matrix(*s.get("rpy", (0, 0, 0))), s["xyz"])) for s in samples]
            )
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"bad trajectory sample: {e}") from e


def pose_at(traj: Trajectory, t: float) -> Pose:
    """Interpolated pose: linear in translation, shortest-arc in rotation.

    Times outside the sampled range of a multi-sample trajectory are clamped to
    the end samples and a `TrajectoryClampWarning` is issued.
    """
    if len(traj) > 1 and not traj.covers(t):
        warnings.warn(f"t={t} outside trajectory [{traj.times[0]}, {traj.times[-1]}]; clamped",
                      TrajectoryClampWarning, stacklevel=2)
    return interpolate_pose(traj, t)


def interpolate_pose(traj: Trajectory, t: float) -> Pose:
    """`pose_at` without the clamp warning, for callers that check coverage once."""
    n = len(traj)
    if n == 0:
        raise InputError("empty trajectory")
    if n == 1:
        return traj.pose(0)
    t = min(max(t, traj.times[0]), traj.times[-1])
    i = traj._segment(t)
    t0, t1 = traj.times[i], traj.times[i + 1]
    if t == t0:
        return traj.pose(i)
    if t == t1:
        return traj.pose(i + 1)
    a = (t - t0) / (t1 - t0)
    x = traj.translations[i] + a * (traj.translations[i + 1] - traj.translations[i])
    R0 = traj.rotations[i]
    dR = R0.T @ traj.rotations[i + 1]
    R = R0 @ _rotation_exp(a * _rotation_log(dR))
    return Pose(R, x)


def interpolate_poses(traj: Trajectory, times) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized `interpolate_pose`: rotations (K, 3, 3) and translations (K, 3)."""
    times = np.atleast_1d(np.asarray(times, dtype=np.float64))
    n = len(traj)
    if n == 0:
        raise InputError("empty trajectory")
    if n == 1:
        return (np.repeat(traj.rotations[:1], len(times), 0), np.repeat(traj.translations[:1], len(times), 0))
    t = np.clip(times, traj.times[0], traj.times[-1])
    seg = np.clip(np.searchsorted(traj.times, t, side="right") - 1, 0, n - 2)
    t0, t1 = traj.times[seg], traj.times[seg + 1]
    a = (t - t0) / (t1 - t0)
    x = traj.translations[seg] + a[:, None] * (traj.translations[seg + 1] - traj.translations[seg])
    R = np.empty((len(t), 3, 3))
    for i in np.unique(seg):
        m = seg == i
        R0 = traj.rotations[i]
        w = _rotation_log(R0.T @ traj.rotations[i + 1])
        angle = float(np.linalg.norm(w))
        K = np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])
        am = a[m][:, None, None]
        if angle < 1e-12:
            E = np.eye(3) + am * K
        else:
            K = K / angle
            th = am * angle
            E = np.eye(3) + np.sin(th) * K + (1.0 - np.cos(th)) * (K @ K)
        R[m] = R0 @ E
    return R, x


def warn_if_uncovered(traj: Trajectory, t0: float, t1: float, what: str) -> bool:
    if len(traj) > 1 and not (traj.covers(t0) and traj.covers(t1)):
        warnings.warn(f"{what} trajectory does not cover [{t0}, {t1}]; poses clamped",
                      TrajectoryClampWarning, stacklevel=3)
        return True
    return False


def velocity_at(traj: Trajectory, t: float) -> np.ndarray:
    """Finite-difference linear velocity on the segment containing t."""
    if len(traj) < 2:
        return np.zeros(3)
    t = min(max(t, traj.times[0]), traj.times[-1])
    i = traj._segment(t)
    dt = traj.times[i + 1] - traj.times[i]
    return (traj.translations[i + 1] - traj.translations[i]) / dt


@dataclass
class ActorSpec:
    asset: str
    trajectory: Trajectory


@dataclass
class Scenario:
    map_path: str
    sdv_trajectory: Trajectory
    actors: list[ActorSpec] = field(default_factory=list)
    sweep_start: float = 0.0
    sweep_period: float = DEFAULT_SWEEP_PERIOD
    seed: int = 0
    exclusion_box: tuple[float, float, float] = DEFAULT_EXCLUSION_BOX

    def __post_init__(self):
        if not self.sweep_period > 0:
            raise InputError("sweep_period must be positive")

    def to_json(self) -> dict:
        return {
            "map": self.map_path,
            "sweep_start": self.sweep_start,
            "sweep_period": self.sweep_period,
            "seed": self.seed,
            "sdv": {
                "trajectory": self.sdv_trajectory.to_json(),
                "exclusion_box": list(self.exclusion_box),
            },
            "actors": [{"asset": a.asset, "trajectory": a.trajectory.to_json()} for a in self.actors],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Scenario":
        try:
            sdv = doc["sdv"]
            return cls(
                map_path=str(doc["map"]),
                sdv_trajectory=Trajectory.from_json(sdv["trajectory"]),
                actors=[ActorSpec(str(a["asset"]), Trajectory.from_json(a["trajectory"])) for a in doc.get("actors", [])],
                sweep_start=float(doc.get("sweep_start", 0.0)),
                sweep_period=float(doc.get("sweep_period", DEFAULT_SWEEP_PERIOD)),
                seed=int(doc.get("seed", 0)),
                exclusion_box=tuple(float(v) for v in sdv.get("exclusion_box", DEFAULT_EXCLUSION_BOX)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"bad scenario: {e}") from e

    @classmethod
    def load(cls, path) -> "Scenario":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: not valid JSON: {e}") from e
        return cls.from_json(doc)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))


@dataclass(frozen=True)
class Actor:
    asset_id: str
    surfels: Surfels
    trajectory: Trajectory


@dataclass(frozen=True)
class Scene:
    static: SurfelMap
    actors: tuple[Actor, ...]
    sdv_trajectory: Trajectory
    exclusion_box: tuple[float, float, float] = DEFAULT_EXCLUSION_BOX
    warnings: tuple[str, ...] = ()

    @property
    def n_actor_surfels(self) -> int:
        return sum(len(a.surfels) for a in self.actors)


def compose(scenario: Scenario, surfel_map: Optional[SurfelMap], bank) -> Scene:
    """Attach bank assets to their trajectories over the static map.

    `bank` is any mapping from asset id to an object with a `surfels` attribute
    (an `ObjectBank` or a plain dict of `ObjectAsset`s).
    """
    if surfel_map is None:
        raise ResolutionError(f"map {scenario.map_path!r} not loaded")
    actors = []
    notes = []
    lo = hi = None
    if len(surfel_map):
        lo, hi = surfel_map.surfels.bounds()
    for spec in scenario.actors:
        try:
            asset = bank[spec.asset]
        except KeyError:
            raise ResolutionError(f"unknown asset {spec.asset!r}") from None
        actors.append(Actor(spec.asset, asset.surfels, spec.trajectory))
        if lo is not None:
            x = spec.trajectory.translations[:, :2]
            if np.any(x < lo[:2]) or np.any(x > hi[:2]):
                msg = f"actor {spec.asset!r} trajectory leaves map bounds"
                warnings.warn(msg, OutOfBoundsWarning, stacklevel=2)
                notes.append(msg)
    return Scene(surfel_map, tuple(actors), scenario.sdv_trajectory, tuple(scenario.exclusion_box), tuple(notes))
