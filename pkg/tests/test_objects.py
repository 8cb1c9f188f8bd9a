import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from lidarsim.errors import EmptyObjectError, InputError, QualityError
from lidarsim.geometry import Pose, rot_z
from lidarsim.objects import (
    BoxLabel,
    ObjectAsset,
    ObjectBank,
    accumulate_object,
    build_object,
    fitness,
    icp_refine,
    meshify_object,
    mirror_symmetry,
    select_object,
)
from lidarsim.points import PointCloud
from lidarsim.synth import box_asset, box_object_snippet, box_surface


def car_cloud(rng, n=1500):
    """Box body with an off-centre cabin: no rotational symmetry for ICP to slip along."""
    L, W, H = 4.5, 1.8, 1.0
    u = rng.uniform(-1, 1, (n, 3)) * [L / 2, W / 2, H / 2]
    face = rng.integers(0, 3, n)
    u[np.arange(n), face] = rng.choice([-1, 1], n) * np.array([L / 2, W / 2, H / 2])[face]
    cabin = rng.uniform(-1, 1, (n // 2, 3)) * [1.0, 0.8, 0.3] + [-0.5, 0, 0.8]
    return np.vstack([u, cabin])


def random_transform(rng, max_deg=20.0, max_t=0.3):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    R = Rotation.from_rotvec(axis * math.radians(rng.uniform(0, max_deg))).as_matrix()
    d = rng.normal(size=3)
    return Pose(R, d / np.linalg.norm(d) * rng.uniform(0, max_t))


def pose_error(a: Pose, b: Pose):
    dR = a.rotation @ b.rotation.T
    ang = math.degrees(math.acos(max(-1.0, min(1.0, (np.trace(dR) - 1) / 2))))
    return ang, float(np.linalg.norm(a.translation - b.translation))


class TestAccumulate:
    def test_static_two_sweeps(self):
        pts = PointCloud.from_positions(np.random.default_rng(0).uniform(-0.5, 0.5, (100, 3)))
        label = BoxLabel([0, 0, 0], 0.0, (2, 2, 2))
        out = accumulate_object([(pts, Pose()), (pts, Pose())], [label, label])
        assert len(out) == 200
        np.testing.assert_array_equal(out.position[:100], out.position[100:])

    def test_moving_box_frame_cancels(self):
        local = np.random.default_rng(1).uniform(-0.5, 0.5, (100, 3))
        l0 = BoxLabel([5, 0, 0], 0.2, (2, 2, 2))
        l1 = BoxLabel([6, 0, 0], 0.2, (2, 2, 2))
        s0 = PointCloud.from_positions(l0.pose.apply(local))
        s1 = PointCloud.from_positions(l1.pose.apply(local))
        out = accumulate_object([(s0, Pose()), (s1, Pose())], [l0, l1])
        np.testing.assert_allclose(out.position[:100], out.position[100:], atol=1e-12)
        np.testing.assert_allclose(out.position[:100], local, atol=1e-12)

    def test_outside_point_excluded(self):
        pts = PointCloud.from_positions([[5, 0, 0], [0.5, 0, 0]])
        out = accumulate_object([(pts, Pose())], [BoxLabel([0, 0, 0], 0, (4, 2, 2))])
        np.testing.assert_array_equal(out.position, [[0.5, 0, 0]])

    def test_empty_object(self):
        pts = PointCloud.from_positions([[50, 0, 0]])
        with pytest.raises(EmptyObjectError):
            accumulate_object([(pts, Pose())], [BoxLabel([0, 0, 0], 0, (1, 1, 1))])

    def test_label_count_mismatch(self):
        with pytest.raises(InputError):
            accumulate_object([(PointCloud.empty(), Pose())], [])


class TestMirror:
    def test_example(self):
        out = mirror_symmetry(PointCloud.from_positions([[1.0, 0.5, 0.2]]))
        assert {tuple(p) for p in out.position} == {(1.0, 0.5, 0.2), (1.0, -0.5, 0.2)}

    def test_on_plane_duplicated(self):
        out = mirror_symmetry(PointCloud.from_positions([[1.0, 0.0, 0.2]]))
        assert len(out) == 2
        np.testing.assert_array_equal(out.position[0], out.position[1])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_involution_and_exact_symmetry(self, seed):
        pts = np.random.default_rng(seed).normal(size=(50, 3))
        out = mirror_symmetry(PointCloud.from_positions(pts))
        as_set = {tuple(p) for p in out.position}
        assert all((x, -y, z) in as_set for x, y, z in as_set)
        # the reflection applied twice is the identity on every point
        flip = np.array([1.0, -1.0, 1.0])
        np.testing.assert_array_equal(out.position * flip * flip, out.position)
        lo, hi = out.position.min(0), out.position.max(0)
        ymax = np.abs(pts[:, 1]).max()
        assert lo[1] == -ymax and hi[1] == ymax


class TestIcp:
    def test_identity(self):
        src = car_cloud(np.random.default_rng(0))
        res = icp_refine(src, src)
        assert res.converged
        ang, dt = pose_error(res.pose, Pose())
        assert ang < 1e-6 and dt < 1e-6

    def test_known_transform(self):
        src = car_cloud(np.random.default_rng(0))
        T = Pose(rot_z(math.radians(5)), [0.1, 0.05, 0])
        res = icp_refine(src, T.apply(src))
        ang, dt = pose_error(res.pose, T)
        assert ang <= 0.5 and dt <= 0.01

    def test_intensity_weighting_helps(self):
        # two geometrically identical squares 0.3 m apart that differ only in intensity;
        # the source starts shifted so that plain nearest-neighbour pairs the wrong squares
        rng = np.random.default_rng(2)
        g = np.stack(np.meshgrid(np.linspace(0, 0.5, 12), np.linspace(0, 0.5, 12)), -1).reshape(-1, 2)
        sq = np.column_stack([g, np.zeros(len(g))])
        tgt = np.vstack([sq, sq + [0.8, 0, 0]])
        inten = np.concatenate([np.full(len(sq), 0.1), np.full(len(sq), 0.9)])
        true = Pose(np.eye(3), [0.5, 0, 0])
        src = true.inverse().apply(tgt) + rng.normal(0, 0.001, tgt.shape)
        w = icp_refine(src, tgt, inten, inten)
        u = icp_refine(src, tgt, inten, inten, use_intensity=False)
        err_w = pose_error(w.pose, true)[1]
        err_u = pose_error(u.pose, true)[1]
        assert err_w < err_u

    def test_non_convergence_flag(self):
        src = car_cloud(np.random.default_rng(3))
        T = random_transform(np.random.default_rng(4))
        res = icp_refine(src, T.apply(src), max_iters=1)
        assert not res.converged and res.iterations == 1

    def test_too_few_points(self):
        with pytest.raises(InputError):
            icp_refine(np.zeros((3, 3)), np.zeros((3, 3)))


class TestMeshify:
    def test_box_surfels_outward(self):
        rng = np.random.default_rng(5)
        dims = (4.0, 2.0, 1.5)
        vp = np.array([10.0, 6.0, 5.0])
        pts, inten = box_surface(rng, dims, 60000, vp)
        cloud = PointCloud.from_positions(pts, intensity=inten, sensor_origin=vp)
        asset = meshify_object(cloud, dims, "b")
        s = asset.surfels
        half = np.asarray(dims) / 2
        # every surfel lies on a face and its normal points out of the box towards the sensor
        on_face = np.isclose(np.abs(s.center), half, atol=0.03)
        assert np.all(on_face.any(axis=1))
        assert np.all(np.sum(s.normal * (vp - s.center), axis=1) >= 0)
        # away from edges the 0.2 m normal neighbourhood sees a single face
        interior = np.abs(s.center) < half - 0.25
        for a in range(3):
            sel = on_face[:, a] & np.delete(interior, a, axis=1).all(axis=1)
            assert sel.any()
            assert np.all(s.normal[sel, a] * np.sign(s.center[sel, a]) > 0.9)

    def test_isolated_points_rejected(self):
        pts = PointCloud.from_positions(np.arange(30).reshape(10, 3) * 10.0)
        with pytest.raises(QualityError):
            meshify_object(pts)


class TestBuildObject:
    def test_box_dims_within_10_percent(self):
        snip = box_object_snippet(np.random.default_rng(6))
        asset, reports = build_object([(s.points, s.pose) for s in snip.sweeps], snip.labels, "box")
        assert len(reports) == 4
        lo, hi = asset.surfels.bounds()
        extent = hi - lo
        np.testing.assert_allclose(extent, snip.dims, rtol=0.10)
        assert asset.within_box()

    def test_single_sweep_no_icp(self):
        snip = box_object_snippet(np.random.default_rng(7), n_sweeps=1)
        asset, reports = build_object([(s.points, s.pose) for s in snip.sweeps], snip.labels, "one")
        assert reports == [] and len(asset.surfels) > 0


def make_bank(rng, n):
    return [ObjectAsset(box_asset(rng, spacing=1.0).surfels, tuple(rng.uniform(1, 5, 3)), f"a{i}",
                        float(rng.uniform(-math.pi, math.pi))) for i in range(n)]


class TestSelect:
    def test_exact_match_k1(self):
        rng = np.random.default_rng(8)
        bank = make_bank(rng, 20)
        q = bank[13]
        assert select_object(bank, q.dims, q.rel_orientation, k=1).source_id == "a13"
        assert fitness(q, q.dims, q.rel_orientation) == 0.0

    def test_k1_ignores_seed(self):
        bank = make_bank(np.random.default_rng(9), 30)
        picks = {select_object(bank, (4, 2, 1.5), 0.3, k=1, seed=s).source_id for s in range(20)}
        assert len(picks) == 1

    def test_k5_top_set_by_exhaustive_scoring(self):
        bank = make_bank(np.random.default_rng(10), 100)
        q, rel = (4.5, 1.9, 1.6), 0.7
        scores = [fitness(a, q, rel) for a in bank]
        cutoff = sorted(scores, reverse=True)[4]
        seen = set()
        for seed in range(50):
            a = select_object(bank, q, rel, k=5, seed=seed)
            assert fitness(a, q, rel) >= cutoff
            assert select_object(bank, q, rel, k=5, seed=seed) is a
            seen.add(a.source_id)
        assert len(seen) > 1

    def test_empty_bank(self):
        with pytest.raises(InputError):
            select_object([], (1, 1, 1), 0.0)


class TestBank:
    def test_add_and_reload(self, tmp_path):
        rng = np.random.default_rng(11)
        bank = ObjectBank.open(tmp_path / "bank", create=True)
        bank.add(box_asset(rng, source_id="car"))
        again = ObjectBank.open(tmp_path / "bank")
        assert list(again) == ["car"]
        assert again["car"].surfels.equals(bank["car"].surfels)
        with pytest.raises(KeyError):
            again["truck"]
