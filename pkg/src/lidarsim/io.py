"""Little-endian binary formats: LSWP sweeps, LSRF surfels, LGRD grids.

All layouts are packed (no padding) and byte-exact across platforms.

LSWP: "LSWP" | u16 version | u64 count | f64[12] pose (R row-major, then t)
      | f64 sweep_start | count x {f32 x,y,z,intensity; u8 laser_id;
      u8 semantic; u8 dynamic; f64 timestamp}
LSRF: "LSRF" | u16 version | u64 count | count x {f32 cx,cy,cz,nx,ny,nz,radius,
      orig_intensity,orig_range,orig_incidence; u8 semantic}
LGRD: "LGRD" | u16 version | u16 channels | u16 rows | u16 cols
      | f32 data, channel-major then row-major
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .geometry import Pose, Surfels
from .points import PointCloud

VERSION = 1

SWEEP_RECORD = np.dtype(
    [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("intensity", "<f4"),
     ("laser_id", "u1"), ("semantic", "u1"), ("dynamic", "u1"), ("timestamp", "<f8")]
)
SURFEL_RECORD = np.dtype(
    [("cx", "<f4"), ("cy", "<f4"), ("cz", "<f4"), ("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4"),
     ("radius", "<f4"), ("orig_intensity", "<f4"), ("orig_range", "<f4"), ("orig_incidence", "<f4"),
     ("semantic", "u1")]
)
_PREFIX = struct.Struct("<4sHQ")
_SWEEP_HEADER = struct.Struct("<12dd")
_GRID_HEADER = struct.Struct("<4sHHHH")


def atomic_write(path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"{path}: cannot read: {e}") from e


def _check_prefix(buf: bytes, magic: bytes, path, record_size: int, header_extra: int = 0) -> int:
    if len(buf) < _PREFIX.size:
        raise FormatError(f"{path}: truncated header")
    m, version, count = _PREFIX.unpack_from(buf)
    if m != magic:
        raise FormatError(f"{path}: bad magic {m!r}, expected {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = _PREFIX.size + header_extra + count * record_size
    if len(buf) != expected:
        raise FormatError(f"{path}: payload is {len(buf)} bytes, header implies {expected}")
    return count


@dataclass
class Sweep:
    """One recorded sweep: points in the sensor frame plus its sensor-to-map pose."""

    points: PointCloud
    pose: Pose
    sweep_start: float = 0.0

    def in_map_frame(self) -> PointCloud:
        return self.points.replace(
            position=self.pose.apply(self.points.position),
            sensor_origin=np.broadcast_to(self.pose.translation, (len(self.points), 3)),
        )


def encode_sweep(sweep: Sweep) -> bytes:
    pts = sweep.points
    rec = np.zeros(len(pts), SWEEP_RECORD)
    rec["x"], rec["y"], rec["z"] = pts.position.T
    rec["intensity"] = pts.intensity
    lid = pts.laser_id
    if np.any((lid < 0) | (lid > 255)):
        raise FormatError("laser_id must fit in u8 for LSWP")
    rec["laser_id"] = lid
    rec["semantic"] = pts.semantic
    rec["dynamic"] = pts.dynamic
    rec["timestamp"] = pts.timestamp
    head = _PREFIX.pack(b"LSWP", VERSION, len(pts))
    head += _SWEEP_HEADER.pack(*sweep.pose.rotation.reshape(-1), *sweep.pose.translation, sweep.sweep_start)
    return head + rec.tobytes()


def decode_sweep(buf: bytes, path="<bytes>") -> Sweep:
    count = _check_prefix(buf, b"LSWP", path, SWEEP_RECORD.itemsize, _SWEEP_HEADER.size)
    vals = _SWEEP_HEADER.unpack_from(buf, _PREFIX.size)
    R = np.array(vals[:9]).reshape(3, 3)
    pose = Pose(R, vals[9:12])
    rec = np.frombuffer(buf, SWEEP_RECORD, count, _PREFIX.size + _SWEEP_HEADER.size)
    pts = PointCloud(
        np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64),
        rec["intensity"].astype(np.float64),
        rec["laser_id"],
        rec["timestamp"],
        rec["semantic"],
        np.zeros(3),
        rec["dynamic"] != 0,
    )
    return Sweep(pts, pose, vals[12])


def write_sweep(path, sweep: Sweep) -> None:
    atomic_write(path, encode_sweep(sweep))


def read_sweep(path) -> Sweep:
    return decode_sweep(_read(path), path)


def encode_surfels(s: Surfels) -> bytes:
    rec = np.zeros(len(s), SURFEL_RECORD)
    rec["cx"], rec["cy"], rec["cz"] = s.center.T
    rec["nx"], rec["ny"], rec["nz"] = s.normal.T
    rec["radius"] = s.radius
    rec["orig_intensity"] = s.orig_intensity
    rec["orig_range"] = s.orig_range
    rec["orig_incidence"] = s.orig_incidence
    rec["semantic"] = s.semantic
    return _PREFIX.pack(b"LSRF", VERSION, len(s)) + rec.tobytes()


def decode_surfels(buf: bytes, path="<bytes>") -> Surfels:
    count = _check_prefix(buf, b"LSRF", path, SURFEL_RECORD.itemsize)
    rec = np.frombuffer(buf, SURFEL_RECORD, count, _PREFIX.size)
    f = lambda *names: np.stack([rec[n] for n in names], axis=1).astype(np.float64)  # noqa: E731
    return Surfels(
        f("cx", "cy", "cz"),
        f("nx", "ny", "nz"),
        rec["radius"].astype(np.float64),
        rec["orig_intensity"].astype(np.float64),
        rec["orig_range"].astype(np.float64),
        rec["orig_incidence"].astype(np.float64),
        rec["semantic"],
    )


def write_surfels(path, s: Surfels) -> None:
    atomic_write(path, encode_surfels(s))


def read_surfels(path) -> Surfels:
    return decode_surfels(_read(path), path)


def encode_grid(grid: np.ndarray) -> bytes:
    g = np.asarray(grid)
    if g.ndim == 2:
        g = g[None]
    if g.ndim != 3:
        raise FormatError(f"grid must be (channels, rows, cols), got {g.shape}")
    c, r, k = g.shape
    return _GRID_HEADER.pack(b"LGRD", VERSION, c, r, k) + np.ascontiguousarray(g, dtype="<f4").tobytes()


def decode_grid(buf: bytes, path="<bytes>") -> np.ndarray:
    """Returns a float32 (channels, rows, cols) array."""
    if len(buf) < _GRID_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    m, version, c, r, k = _GRID_HEADER.unpack_from(buf)
    if m != b"LGRD":
        raise FormatError(f"{path}: bad magic {m!r}, expected b'LGRD'")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = _GRID_HEADER.size + 4 * c * r * k
    if len(buf) != expected:
        raise FormatError(f"{path}: payload is {len(buf)} bytes, header implies {expected}")
    return np.frombuffer(buf, "<f4", c * r * k, _GRID_HEADER.size).reshape(c, r, k).astype(np.float32)


def write_grid(path, grid: np.ndarray) -> None:
    atomic_write(path, encode_grid(grid))


def read_grid(path) -> np.ndarray:
    return decode_grid(_read(path), path)


def write_ply(path, positions: np.ndarray, intensity: np.ndarray) -> None:
    """Binary little-endian PLY with x, y, z, intensity (float32)."""
    n = len(positions)
    head = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\nproperty float intensity\n"
        "end_header\n"
    ).encode()
    body = np.empty((n, 4), "<f4")
    body[:, :3] = positions
    body[:, 3] = intensity
    atomic_write(path, head + body.tobytes())
