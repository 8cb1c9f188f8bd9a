"""Synthetic fixtures: plane and box sweeps, random and street scenes, raydrop pairs."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Pose, SemanticClass, Surfels, rot_z, unit
from .io import Sweep
from .mapping import SurfelMap, disk_radius
from .objects import BoxLabel, ObjectAsset
from .points import PointCloud
from .scene import Actor, Scene, Trajectory


def plane_sweep(rng: np.random.Generator, pose: Pose, n: int = 20000, extent: float = 4.0,
                height: float = -1.8, noise: float = 0.002, t0: float = 0.0) -> Sweep:
    """Points on a ground patch z=height (sensor frame) in front of the sensor."""
    xy = rng.uniform([2.0, -extent / 2], [2.0 + extent, extent / 2], size=(n, 2))
    z = np.full(n, height) + rng.normal(0.0, noise, n)
    pos = np.column_stack([xy, z])
    lid = rng.integers(0, 64, n)
    pts = PointCloud(pos, rng.uniform(0.2, 0.8, n), lid, t0 + rng.uniform(0, 0.1, n),
                     int(SemanticClass.ROAD), np.zeros(3), False)
    return Sweep(pts, pose, t0)


def box_surface(rng: np.random.Generator, dims, n: int, viewpoint=None, noise: float = 0.0,
                face_intensity=None) -> tuple[np.ndarray, np.ndarray]:
    """Points on a box centred at the origin; only faces visible from `viewpoint`.

    Returns positions and per-point intensity (constant per face).
    """
    half = np.asarray(dims, dtype=np.float64) / 2.0
    faces = [(a, s) for a in range(3) for s in (-1.0, 1.0)]
    if viewpoint is not None:
        vp = np.asarray(viewpoint, dtype=np.float64)
        faces = [(a, s) for a, s in faces if s * vp[a] > half[a]]
    if face_intensity is None:
        face_intensity = {f: 0.2 + 0.1 * i for i, f in enumerate([(a, s) for a in range(3) for s in (-1.0, 1.0)])}
    areas = np.array([np.prod(np.delete(2 * half, a)) for a, _ in faces])
    counts = rng.multinomial(n, areas / areas.sum())
    pos, inten = [], []
    for (a, s), k in zip(faces, counts):
        p = rng.uniform(-half, half, size=(k, 3))
        p[:, a] = s * half[a]
        p += rng.normal(0.0, noise, p.shape)
        pos.append(p)
        inten.append(np.full(k, face_intensity[(a, s)]))
    return np.concatenate(pos), np.concatenate(inten)


@dataclass
class ObjectSnippet:
    sweeps: list[Sweep]
    labels: list[BoxLabel]
    dims: tuple[float, float, float]


def box_object_snippet(rng: np.random.Generator, dims=(4.5, 1.9, 1.6), n_sweeps: int = 5,
                       points_per_sweep: int = 3000, speed: float = 5.0, noise: float = 0.005,
                       clutter: int = 200) -> ObjectSnippet:
    """A box-shaped vehicle driving past a static sensor, one label per sweep."""
    sweeps, labels = [], []
    sensor = Pose(rot_z(0.0), [0.0, 0.0, 0.0])
    heading = 0.3
    for k in range(n_sweeps):
        t = 0.1 * k
        center = np.array([8.0 + speed * t * math.cos(heading), 4.0 + speed * t * math.sin(heading), 0.0])
        label = BoxLabel(center, heading, dims, t)
        obj_to_map = label.pose
        vp = obj_to_map.inverse().apply(sensor.translation)
        local, inten = box_surface(rng, dims, points_per_sweep, vp, noise)
        # keep points inside the labelled box despite noise
        local = np.clip(local, -np.asarray(dims) / 2, np.asarray(dims) / 2)
        world = obj_to_map.apply(local)
        far = rng.uniform([-30, -30, -2], [30, 30, 2], size=(clutter, 3))
        pos = np.vstack([world, far])
        n = len(pos)
        pts = PointCloud(sensor.inverse().apply(pos), np.concatenate([inten, np.full(clutter, 0.5)]),
                         rng.integers(0, 64, n), t, int(SemanticClass.VEHICLE), np.zeros(3), True)
        sweeps.append(Sweep(pts, sensor, t))
        labels.append(label)
    return ObjectSnippet(sweeps, labels, tuple(dims))


def box_asset(rng: np.random.Generator, dims=(4.5, 1.9, 1.6), spacing: float = 0.25,
              source_id: str = "box") -> ObjectAsset:
    """A surfel box with outward normals on every face (no reconstruction step)."""
    half = np.asarray(dims) / 2.0
    centers, normals = [], []
    for a in range(3):
        others = [b for b in range(3) if b != a]
        g = [np.arange(-half[b] + spacing / 2, half[b], spacing) for b in others]
        u, v = np.meshgrid(*g, indexing="ij")
        for s in (-1.0, 1.0):
            c = np.zeros((u.size, 3))
            c[:, others[0]] = u.ravel()
            c[:, others[1]] = v.ravel()
            c[:, a] = s * half[a]
            n = np.zeros_like(c)
            n[:, a] = s
            centers.append(c)
            normals.append(n)
    c = np.concatenate(centers)
    n = np.concatenate(normals)
    k = len(c)
    surfels = Surfels(c, n, np.full(k, spacing * 0.75), rng.uniform(0.1, 0.9, k), rng.uniform(5, 30, k),
                      rng.uniform(0, 1.2, k), np.full(k, int(SemanticClass.VEHICLE)))
    return ObjectAsset(surfels, tuple(dims), source_id, 0.0)


def random_surfels(rng: np.random.Generator, n: int, inner: float = 3.0, outer: float = 40.0,
                   rmin: float = 0.1, rmax: float = 2.0) -> Surfels:
    """Randomly oriented disks scattered in a shell around the origin."""
    d = unit(rng.normal(size=(n, 3)))
    d[:, 2] = np.abs(d[:, 2]) * -0.45
    d = unit(d)
    c = d * rng.uniform(inner, outer, (n, 1))
    nrm = unit(rng.normal(size=(n, 3)))
    return Surfels(c, nrm, rng.uniform(rmin, rmax, n), rng.uniform(0, 1, n), rng.uniform(1, 60, n),
                   rng.uniform(0, math.pi / 2, n), rng.integers(1, 4, n))


def random_scene(seed: int, max_surfels: int = 2000, max_actors: int = 3, period: float = 0.1,
                 min_surfels: int = 200) -> Scene:
    """Random static disks plus up to `max_actors` moving random assets, moving SDV."""
    rng = np.random.default_rng(seed)
    n_actors = int(rng.integers(0, max_actors + 1))
    total = int(rng.integers(min_surfels, max_surfels + 1))
    per_actor = [int(rng.integers(20, 150)) for _ in range(n_actors)]
    n_static = max(1, total - sum(per_actor))
    static = random_surfels(rng, n_static, inner=4.0)
    actors = []
    for a in range(n_actors):
        s = random_surfels(rng, per_actor[a], inner=0.0, outer=2.0, rmin=0.05, rmax=0.5)
        start_xy = rng.uniform(-20, 20, 2)
        start_xy += np.sign(start_xy) * 4.0
        start = Pose(rot_z(rng.uniform(-math.pi, math.pi)), [start_xy[0], start_xy[1], rng.uniform(-1, 1)])
        end = Pose(rot_z(rng.uniform(-math.pi, math.pi)), start.translation + rng.uniform(-2, 2, 3))
        traj = Trajectory.from_poses([(-0.05, start), (period + 0.05, end)])
        actors.append(Actor(f"actor{a}", s, traj))
    v = rng.uniform(-15, 15, 3) * [1, 1, 0]
    sdv = Trajectory.linear(Pose(rot_z(rng.uniform(-math.pi, math.pi))), v, -0.1, period + 0.1)
    return Scene(SurfelMap(static), tuple(actors), sdv)


def street_scene(n_surfels: int = 500_000, seed: int = 0, length: float = 120.0) -> Scene:
    """Road, kerbside building facades and parked boxes; static SDV at the origin."""
    rng = np.random.default_rng(seed)
    n_road = n_surfels // 2
    n_wall = n_surfels // 4
    n_rest = n_surfels - n_road - n_wall
    road = np.column_stack([rng.uniform(-length / 2, length / 2, n_road), rng.uniform(-10, 10, n_road),
                            np.full(n_road, -1.8)])
    side = rng.choice([-1.0, 1.0], n_wall)
    wall = np.column_stack([rng.uniform(-length / 2, length / 2, n_wall), side * 10.0,
                            rng.uniform(-1.8, 12.0, n_wall)])
    wall_n = np.column_stack([np.zeros(n_wall), -side, np.zeros(n_wall)])
    # clutter: small randomly oriented disks along the kerbs
    clutter = np.column_stack([rng.uniform(-length / 2, length / 2, n_rest), rng.choice([-1, 1], n_rest) *
                               rng.uniform(6.5, 9.5, n_rest), rng.uniform(-1.8, 1.0, n_rest)])
    clutter_n = unit(rng.normal(size=(n_rest, 3)))
    c = np.vstack([road, wall, clutter])
    n = np.vstack([np.tile([0.0, 0.0, 1.0], (n_road, 1)), wall_n, clutter_n])
    sem = np.concatenate([np.full(n_road, int(SemanticClass.ROAD)), np.full(n_wall, int(SemanticClass.BACKGROUND)),
                          np.full(n_rest, int(SemanticClass.VEHICLE))])
    N = len(c)
    s = Surfels(c, n, np.full(N, disk_radius(0.2)), rng.uniform(0, 1, N), rng.uniform(1, 40, N),
                rng.uniform(0, 1.5, N), sem)
    return Scene(SurfelMap(s), (), Trajectory.static(Pose()))


def drop_by_incidence(grid: np.ndarray, threshold_deg: float = 60.0) -> np.ndarray:
    """Real-occupancy labels: a simulated return survives iff its incidence <= threshold."""
    from .polar import CH_INCIDENCE, CH_OCCUPANCY

    occ = grid[CH_OCCUPANCY] != 0
    return (occ & (grid[CH_INCIDENCE] <= math.radians(threshold_deg))).astype(np.uint8)


def raydrop_pairs(count: int, seed: int = 0, intr=None, n_surfels: int = 100_000, threshold_deg: float = 60.0):
    """`count` (sim grid, real occupancy, rays) triples from street scenes.

    The "real" sweep keeps exactly the simulated returns whose incidence is at
    most `threshold_deg`, so a learned model has a clean rule to recover.
    """
    from .polar import project
    from .raycast import SensorIntrinsics, cast_sweep

    intr = intr or SensorIntrinsics()
    out = []
    for i in range(count):
        scene = street_scene(n_surfels, seed=seed + i)
        hits = cast_sweep(scene, intr, 0.0)
        grid = project(hits)
        out.append((grid, drop_by_incidence(grid, threshold_deg), hits.rays))
    return out


def _scenario_json(map_name: str, sdv: Trajectory, actors=(), seed: int = 0, period: float = 0.1) -> dict:
    from .scene import ActorSpec, Scenario

    return Scenario(map_name, sdv, [ActorSpec(a, t) for a, t in actors], 0.0, period, seed).to_json()


def write_fixture(kind: str, out, count: int = 3, seed: int = 0, intr=None) -> list[str]:
    """Write a named fixture set into directory `out`; returns the written file names."""
    import json
    from pathlib import Path

    from . import io
    from .objects import ObjectBank
    from .polar import to_pointcloud
    from .raycast import SensorIntrinsics

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    intr = intr or SensorIntrinsics()
    written = []

    def put(name, writer, *a):
        writer(out / name, *a)
        written.append(name)

    if kind == "plane-sweeps":
        for i in range(count):
            pose = Pose(rot_z(0.05 * i), [0.5 * i, 0.0, 0.0])
            put(f"sweep_{i:03d}.lswp", io.write_sweep, plane_sweep(rng, pose, t0=0.1 * i))
    elif kind == "box-object":
        snip = box_object_snippet(rng, n_sweeps=max(count, 1))
        for i, s in enumerate(snip.sweeps):
            put(f"sweep_{i:03d}.lswp", io.write_sweep, s)
        doc = {"source_id": "box", "labels": [
            {"t": l.timestamp, "center": list(map(float, l.center)), "heading": l.heading, "dims": list(l.dims)}
            for l in snip.labels]}
        (out / "labels.json").write_text(json.dumps(doc, indent=2))
        written.append("labels.json")
    elif kind in ("scene", "street"):
        if kind == "street":
            static = street_scene(max(count, 1) * 50_000, seed).static.surfels
        else:
            static = random_surfels(rng, 3000)
        put("map.lsrf", io.write_surfels, static)
        bank = ObjectBank.open(out / "bank", create=True)
        bank.add(box_asset(rng, source_id="car"))
        start = Pose(rot_z(0.2), [12.0, 3.0, -0.9])
        actor = Trajectory.linear(start, [0.0, 5.0, 0.0], -0.1, 0.2)
        sdv = Trajectory.linear(Pose(), [3.0, 0.0, 0.0], -0.1, 0.2)
        (out / "scenario.json").write_text(json.dumps(_scenario_json("map.lsrf", sdv, [("car", actor)], seed), indent=2))
        written += ["bank/", "scenario.json"]
    elif kind == "raydrop":
        for i, (grid, real, rays) in enumerate(raydrop_pairs(count, seed, intr)):
            put(f"sim_{i:03d}.lgrd", io.write_grid, grid)
            pts = to_pointcloud(grid, real, rays)
            put(f"real_{i:03d}.lswp", io.write_sweep, Sweep(pts, Pose(), 0.0))
    else:
        raise ValueError(f"unknown fixture kind {kind!r}")
    return written
