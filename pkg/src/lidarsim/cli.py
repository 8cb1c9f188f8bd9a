"""`lidarsim` command line: build-map, build-object, simulate, train-raydrop, eval, synth.

Exit codes: 0 ok, 2 usage, 3 format, 4 quality, 5 resolution.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .errors import FormatError, InputError, LidarSimError, ResolutionError
from .geometry import Pose
from .mapping import DEFAULT_VOXEL, SurfelMap, aggregate_sweeps, build_surfels
from .metrics import AgreementSets, evaluation_report
from .objects import BoxLabel, ObjectBank, build_object
from .points import PointCloud
from .polar import CH_OCCUPANCY, bin_real_sweep, project, to_pointcloud
from .raycast import SensorIntrinsics, cast_sweep, load_intrinsics_csv
from .raydrop import RaydropModel, TrainConfig, predict, sample_mask, train
from .scene import Scenario, compose

log = logging.getLogger("lidarsim")

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_QUALITY, EXIT_RESOLUTION = 0, 2, 3, 4, 5


def _intrinsics(args) -> SensorIntrinsics:
    kw = {}
    if args.n_cols is not None:
        kw["n_cols"] = args.n_cols
    if args.sweep_period is not None:
        kw["sweep_period"] = args.sweep_period
    if args.spin_direction is not None:
        kw["spin_direction"] = args.spin_direction
    if args.intrinsics:
        return load_intrinsics_csv(args.intrinsics, **kw)
    return SensorIntrinsics(**kw)


def cmd_build_map(args) -> int:
    sweeps = [io.read_sweep(p) for p in args.sweeps]
    cloud = aggregate_sweeps([(s.points, s.pose) for s in sweeps])
    smap = build_surfels(cloud, args.voxel_size)
    io.write_surfels(args.out, smap.surfels)
    print(f"surfels: {len(smap)}")
    print(f"dropped degenerate: {smap.n_degenerate}")
    return EXIT_OK


def _load_labels(path) -> tuple[str | None, list[BoxLabel]]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: {e}") from e
    if isinstance(doc, list):
        return None, [BoxLabel.from_json(d) for d in doc]
    return doc.get("source_id"), [BoxLabel.from_json(d) for d in doc.get("labels", [])]


def cmd_build_object(args) -> int:
    sweeps = [io.read_sweep(p) for p in args.sweeps]
    sid, labels = _load_labels(args.labels)
    source_id = args.source_id or sid or Path(args.labels).stem
    bank = ObjectBank.open(args.out_dir, create=True)
    asset, icp = build_object([(s.points, s.pose) for s in sweeps], labels, source_id, args.voxel_size)
    bank.add(asset)
    print(f"asset: {asset.source_id}")
    print(f"surfels: {len(asset.surfels)}")
    print(f"icp steps: {len(icp)} (converged {sum(r.converged for r in icp)})")
    return EXIT_OK


def _load_map(path) -> SurfelMap:
    if not Path(path).exists():
        raise ResolutionError(f"map {path} not found")
    return SurfelMap(io.read_surfels(path))


def simulate(scenario: Scenario, scenario_dir: Path, bank_dir, model_path, intr: SensorIntrinsics,
             threads: int = 1):
    """Run compose -> cast -> project -> (raydrop) -> points. Returns a dict of outputs."""
    map_path = Path(scenario.map_path)
    if not map_path.is_absolute():
        map_path = scenario_dir / map_path
    smap = _load_map(map_path)
    bank = ObjectBank.open(bank_dir) if bank_dir else {}
    scene = compose(scenario, smap, bank)
    if intr.sweep_period != scenario.sweep_period:
        intr = SensorIntrinsics(intr.n_beams, intr.n_cols, intr.elevation_table, intr.azimuth_start,
                                intr.spin_direction, scenario.sweep_period)
    hits = cast_sweep(scene, intr, scenario.sweep_start, threads=threads)
    grid = project(hits)
    prob = None
    if model_path:
        model = RaydropModel.load(model_path)
        prob = predict(model, grid)
        keep = sample_mask(prob, scenario.seed, threads)
    else:
        keep = grid[CH_OCCUPANCY].astype(np.uint8)
    cloud = to_pointcloud(grid, keep, hits.rays)
    return {"hits": hits, "grid": grid, "prob": prob, "keep": keep, "cloud": cloud}


def cmd_simulate(args) -> int:
    scenario = Scenario.load(args.scenario)
    out = simulate(scenario, Path(args.scenario).parent, args.bank, args.model, _intrinsics(args), args.threads)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    rays = out["hits"].rays
    start = Pose(rays.start_rotation, rays.start_translation)
    cloud: PointCloud = out["cloud"]
    local = cloud.replace(position=start.inverse().apply(cloud.position), sensor_origin=np.zeros(3))
    io.write_grid(f"{prefix}.grid.lgrd", out["grid"])
    io.write_grid(f"{prefix}.mask.lgrd", out["keep"])
    if out["prob"] is not None:
        io.write_grid(f"{prefix}.prob.lgrd", out["prob"])
    io.write_sweep(f"{prefix}.lswp", io.Sweep(local, start, scenario.sweep_start))
    io.write_ply(f"{prefix}.ply", cloud.position, cloud.intensity)
    print(f"cast returns: {int(out['grid'][CH_OCCUPANCY].sum())}")
    print(f"output points: {len(cloud)}")
    return EXIT_OK


def cmd_train_raydrop(args) -> int:
    if not args.sim or len(args.sim) != len(args.real):
        raise InputError("need one --real sweep per --sim grid (at least one pair)")
    cfg = TrainConfig()
    if args.config:
        try:
            cfg = TrainConfig.from_json(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as e:
            raise FormatError(f"{args.config}: {e}") from e
    intr = _intrinsics(args)
    pairs = []
    for g, r in zip(args.sim, args.real):
        grid = io.read_grid(g).astype(np.float64)
        sweep = io.read_sweep(r)
        binned = bin_real_sweep(sweep.points, intr, sweep.sweep_start)
        pairs.append((grid, binned.occupancy))
    result = train(pairs, cfg)
    result.model.save(args.out)
    log_path = args.loss_log or f"{args.out}.loss.csv"
    with open(log_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "loss"])
        w.writerow([0, repr(result.initial_loss)])
        for i, loss in enumerate(result.loss_history, 1):
            w.writerow([i, repr(loss)])
    print(f"initial loss: {result.initial_loss:.6f}")
    print(f"final loss: {result.model.final_loss:.6f}")
    return EXIT_OK


def _mask_and_count(path, intr: SensorIntrinsics) -> tuple[np.ndarray, int]:
    p = Path(path)
    with open(p, "rb") as f:
        magic = f.read(4)
    if magic == b"LGRD":
        g = io.read_grid(p)
        m = g[CH_OCCUPANCY] if g.shape[0] == 8 else g[0]
        m = (m != 0).astype(np.uint8)
        return m, int(m.sum())
    if magic == b"LSWP":
        s = io.read_sweep(p)
        b = bin_real_sweep(s.points, intr, s.sweep_start)
        return b.occupancy, len(s.points)
    raise FormatError(f"{p}: bad magic {magic!r}, expected LGRD or LSWP")


def cmd_eval(args) -> int:
    intr = _intrinsics(args)
    sim_mask, sim_count = _mask_and_count(args.sim, intr)
    real_mask, real_count = _mask_and_count(args.real, intr)
    sets = AgreementSets.load(args.agreement) if args.agreement else None
    report = evaluation_report(sim_mask, real_mask, sim_count, real_count, sets)
    Path(args.report).write_text(json.dumps(report, indent=2))
    print(json.dumps(report))
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synth import write_fixture

    for name in write_fixture(args.kind, args.out, args.count, args.seed, _intrinsics(args)):
        print(name)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--intrinsics", help="CSV of beam_id,elevation_deg")
    common.add_argument("--n-cols", type=int)
    common.add_argument("--sweep-period", type=float)
    common.add_argument("--spin-direction", type=int, choices=(-1, 1))
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="lidarsim", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("build-map", parents=[common], help="aggregate sweeps into a surfel map")
    s.add_argument("sweeps", nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--voxel-size", type=float, default=DEFAULT_VOXEL)
    s.set_defaults(fn=cmd_build_map)

    s = sub.add_parser("build-object", parents=[common], help="reconstruct one object asset")
    s.add_argument("sweeps", nargs="+")
    s.add_argument("--labels", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--source-id")
    s.add_argument("--voxel-size", type=float, default=DEFAULT_VOXEL)
    s.set_defaults(fn=cmd_build_object)

    s = sub.add_parser("simulate", parents=[common], help="simulate one sweep of a scenario")
    s.add_argument("scenario")
    s.add_argument("--bank")
    s.add_argument("--model")
    s.add_argument("--out", required=True, help="output prefix")
    s.set_defaults(fn=cmd_simulate)

    s = sub.add_parser("train-raydrop", parents=[common], help="fit a raydrop model")
    s.add_argument("--sim", nargs="*", default=[], help="simulated LGRD feature grids")
    s.add_argument("--real", nargs="*", default=[], help="matching real LSWP sweeps")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--loss-log")
    s.set_defaults(fn=cmd_train_raydrop)

    s = sub.add_parser("eval", parents=[common], help="compare simulated and real sweeps")
    s.add_argument("--sim", required=True)
    s.add_argument("--real", required=True)
    s.add_argument("--agreement", help="JSON with R_plus, R_minus, S_plus, S_minus")
    s.add_argument("--report", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("synth", parents=[common], help="generate synthetic fixtures")
    s.add_argument("kind", choices=("plane-sweeps", "box-object", "scene", "raydrop", "street"))
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--count", type=int, default=3)
    s.set_defaults(fn=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except LidarSimError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
