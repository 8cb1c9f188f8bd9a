from .bvh import BVH, build_bvh, closest_hits
from .engine import HitImage, cast_sweep
from .sensor import (
    N_ACTOR_INTERVALS,
    RayGrid,
    SensorIntrinsics,
    generate_rays,
    load_intrinsics_csv,
    save_intrinsics_csv,
)

__all__ = [
    "BVH",
    "HitImage",
    "N_ACTOR_INTERVALS",
    "RayGrid",
    "SensorIntrinsics",
    "build_bvh",
    "cast_sweep",
    "closest_hits",
    "generate_rays",
    "load_intrinsics_csv",
    "save_intrinsics_csv",
]
