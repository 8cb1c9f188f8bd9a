import struct

import numpy as np
import pytest

from lidarsim import io
from lidarsim.errors import FormatError
from lidarsim.geometry import Pose, rpy_to_matrix
from lidarsim.points import PointCloud
from lidarsim.synth import random_surfels


def sample_sweep(rng, n=500):
    pts = PointCloud.from_positions(rng.normal(0, 20, (n, 3)), intensity=rng.random(n),
                                    laser_id=rng.integers(0, 64, n), timestamp=rng.uniform(0, 0.1, n),
                                    semantic=rng.integers(0, 4, n), dynamic=rng.random(n) < 0.2)
    return io.Sweep(pts, Pose(rpy_to_matrix(0.1, -0.2, 1.3), [4.0, -2.0, 1.5]), 12.25)


class TestSweepFile:
    def test_byte_roundtrip(self, tmp_path):
        sw = sample_sweep(np.random.default_rng(0))
        io.write_sweep(tmp_path / "a.lswp", sw)
        back = io.read_sweep(tmp_path / "a.lswp")
        io.write_sweep(tmp_path / "b.lswp", back)
        assert (tmp_path / "a.lswp").read_bytes() == (tmp_path / "b.lswp").read_bytes()
        np.testing.assert_array_equal(back.points.laser_id, sw.points.laser_id)
        np.testing.assert_array_equal(back.points.timestamp, sw.points.timestamp)
        np.testing.assert_array_equal(back.points.dynamic, sw.points.dynamic)
        np.testing.assert_allclose(back.points.position, sw.points.position, rtol=1e-6)
        np.testing.assert_array_equal(back.pose.rotation, sw.pose.rotation)
        assert back.sweep_start == 12.25

    def test_layout(self):
        sw = sample_sweep(np.random.default_rng(1), n=3)
        buf = io.encode_sweep(sw)
        magic, version, count = struct.unpack_from("<4sHQ", buf)
        assert (magic, version, count) == (b"LSWP", 1, 3)
        # prefix, 12 pose doubles, sweep start, then 3 records of 4 f32 + 3 u8 + f64
        assert len(buf) == 14 + 13 * 8 + 3 * (16 + 3 + 8)

    def test_empty(self):
        sw = io.Sweep(PointCloud.empty().replace(laser_id=np.zeros(0, np.int64)), Pose())
        assert len(io.decode_sweep(io.encode_sweep(sw)).points) == 0

    def test_in_map_frame(self):
        sw = sample_sweep(np.random.default_rng(2), n=10)
        np.testing.assert_allclose(sw.in_map_frame().position, sw.pose.apply(sw.points.position))


class TestSurfelFile:
    def test_byte_roundtrip(self, tmp_path):
        s = random_surfels(np.random.default_rng(3), 200)
        io.write_surfels(tmp_path / "a.lsrf", s)
        back = io.read_surfels(tmp_path / "a.lsrf")
        assert io.encode_surfels(back) == (tmp_path / "a.lsrf").read_bytes()
        np.testing.assert_allclose(back.center, s.center, rtol=1e-6)
        np.testing.assert_array_equal(back.semantic, s.semantic)
        assert len((tmp_path / "a.lsrf").read_bytes()) == 14 + 200 * 41


class TestGridFile:
    def test_byte_roundtrip(self, tmp_path):
        g = np.random.default_rng(4).random((8, 64, 2048))
        io.write_grid(tmp_path / "g.lgrd", g)
        back = io.read_grid(tmp_path / "g.lgrd")
        assert back.shape == (8, 64, 2048) and back.dtype == np.float32
        assert io.encode_grid(back) == (tmp_path / "g.lgrd").read_bytes()
        assert struct.unpack_from("<4sHHHH", io.encode_grid(back)) == (b"LGRD", 1, 8, 64, 2048)

    def test_single_channel(self):
        assert io.decode_grid(io.encode_grid(np.ones((3, 5)))).shape == (1, 3, 5)


class TestCorruptFiles:
    @pytest.mark.parametrize("kind", ["sweep", "surfels", "grid"])
    def test_bad_magic_and_truncation(self, tmp_path, kind):
        rng = np.random.default_rng(5)
        enc, dec = {
            "sweep": (lambda: io.encode_sweep(sample_sweep(rng, 4)), io.decode_sweep),
            "surfels": (lambda: io.encode_surfels(random_surfels(rng, 4)), io.decode_surfels),
            "grid": (lambda: io.encode_grid(np.zeros((2, 3, 4))), io.decode_grid),
        }[kind]
        buf = enc()
        with pytest.raises(FormatError, match="bad magic"):
            dec(b"NOPE" + buf[4:])
        with pytest.raises(FormatError):
            dec(buf[:-1])
        with pytest.raises(FormatError):
            dec(buf[:3])
        bumped = bytearray(buf)
        bumped[4] = 9
        with pytest.raises(FormatError, match="version"):
            dec(bytes(bumped))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FormatError):
            io.read_grid(tmp_path / "nope.lgrd")

    def test_atomic_write_leaves_no_temp(self, tmp_path):
        io.atomic_write(tmp_path / "x.bin", b"abc")
        assert [p.name for p in tmp_path.iterdir()] == ["x.bin"]


class TestPly:
    def test_header_and_size(self, tmp_path):
        pos = np.random.default_rng(6).normal(size=(10, 3))
        io.write_ply(tmp_path / "p.ply", pos, np.linspace(0, 1, 10))
        data = (tmp_path / "p.ply").read_bytes()
        head, body = data.split(b"end_header\n", 1)
        assert b"element vertex 10" in head and len(body) == 10 * 16
        np.testing.assert_allclose(np.frombuffer(body, "<f4").reshape(10, 4)[:, :3], pos, rtol=1e-6)
