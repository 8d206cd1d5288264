# corruption.py
"""
Cube-based corruption for masked image modelling.

A volume is tiled into regular non-overlapping cubes (trailing cubes on an
axis may be smaller), a subset of cubes is sampled, and each sampled cube
receives one corruption op. Two policies:

- static:  fixed cube size and fraction, occlusion only
- dynamic: cube size and fraction redrawn for every volume; half of the
           corrupted cubes are occluded, the rest rotated or flipped
"""

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, NamedTuple, Tuple, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import ndimage

from config import VoxmimError, as_triple, round_half_up
from volume import Volume

logger = logging.getLogger(__name__)

ROTATION_DEGREES = 30.0
OCCLUSION_FILL = 0.0


class CorruptionError(VoxmimError, ValueError):
    """Bad grid, policy or plan."""


# ----------------------------
# Types
# ----------------------------
class CorruptionOp(str, Enum):
    OCCLUSION = "occlusion"
    ROTATION30 = "rotation30"
    FLIP_HORIZONTAL = "flip_horizontal"
    FLIP_VERTICAL = "flip_vertical"


NON_OCCLUSION_OPS = (CorruptionOp.ROTATION30, CorruptionOp.FLIP_HORIZONTAL, CorruptionOp.FLIP_VERTICAL)


class Cube(NamedTuple):
    origin: Tuple[int, int, int]
    size: Tuple[int, int, int]

    @property
    def slices(self) -> Tuple[slice, slice, slice]:
        return tuple(slice(o, o + s) for o, s in zip(self.origin, self.size))

    @property
    def voxel_count(self) -> int:
        return self.size[0] * self.size[1] * self.size[2]


@dataclass(frozen=True)
class CubeGrid:
    volume_dims: Tuple[int, int, int]
    cube_dims: Tuple[int, int, int]
    cubes: List[Cube] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.cubes)


@dataclass(frozen=True)
class MaskPlan:
    assignments: List[Tuple[int, CorruptionOp]]
    sampled_fraction: float

    @property
    def cube_indices(self) -> List[int]:
        return [i for i, _ in self.assignments]


class MaskPolicy(BaseModel):
    """
    Static mode reads `cube_dims` and `subsample`; dynamic mode reads
    `inplane_range`, `depth_range` and `subsample_range`. Both read
    `occlusion_ratio`, the chance a selected cube is occluded rather than
    rotated/flipped.
    """

    model_config = ConfigDict(extra="forbid")

    mode: Literal["static", "dynamic"] = "dynamic"
    cube_dims: Tuple[int, int, int] = (32, 32, 16)
    subsample: float = Field(0.60, gt=0.0, le=1.0)
    inplane_range: Tuple[int, int] = (9, 32)
    depth_range: Tuple[int, int] = (2, 16)
    subsample_range: Tuple[float, float] = (0.60, 0.90)
    occlusion_ratio: float = Field(0.5, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _check_ranges(self):
        if min(self.cube_dims) < 1:
            raise ValueError("cube_dims must be positive")
        for name in ("inplane_range", "depth_range"):
            lo, hi = getattr(self, name)
            if lo < 1 or lo > hi:
                raise ValueError(f"{name} must satisfy 1 <= lo <= hi, got {(lo, hi)}")
        lo, hi = self.subsample_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"subsample_range must satisfy 0 < lo <= hi <= 1, got {(lo, hi)}")
        return self

    @classmethod
    def static(cls, **overrides) -> "MaskPolicy":
        return cls(**{"mode": "static", "cube_dims": (32, 32, 16), "subsample": 0.60, "occlusion_ratio": 1.0, **overrides})

    @classmethod
    def dynamic(cls, **overrides) -> "MaskPolicy":
        return cls(
            **{
                "mode": "dynamic",
                "inplane_range": (9, 32),
                "depth_range": (2, 16),
                "subsample_range": (0.60, 0.90),
                "occlusion_ratio": 0.5,
                **overrides,
            }
        )


# ----------------------------
# Partition
# ----------------------------
def partition_cubes(volume_dims, cube_dims) -> CubeGrid:
    """Tile `volume_dims` with cubes of `cube_dims`; residual cubes trail each axis."""
    volume_dims = as_triple(volume_dims, "volume_dims", int)
    cube_dims = as_triple(cube_dims, "cube_dims", int)
    if min(volume_dims) < 1 or min(cube_dims) < 1:
        raise CorruptionError(f"Dims must be positive: volume {volume_dims}, cube {cube_dims}")
    for axis, (v, c) in enumerate(zip(volume_dims, cube_dims)):
        if c > v:
            raise CorruptionError(f"Cube dim {c} exceeds volume dim {v} on axis {axis}")

    def spans(v: int, c: int) -> List[Tuple[int, int]]:
        return [(o, min(c, v - o)) for o in range(0, v, c)]

    xs, ys, zs = (spans(v, c) for v, c in zip(volume_dims, cube_dims))
    cubes = [
        Cube(origin=(ox, oy, oz), size=(sx, sy, sz))
        for oz, sz in zs
        for oy, sy in ys
        for ox, sx in xs
    ]
    return CubeGrid(volume_dims=volume_dims, cube_dims=cube_dims, cubes=cubes)


# ----------------------------
# Planning
# ----------------------------
def corrupted_count(fraction: float, n_cubes: int) -> int:
    """round-half-up(fraction * K), at least one cube for a non-empty grid."""
    if n_cubes == 0:
        return 0
    return min(n_cubes, max(1, round_half_up(fraction * n_cubes)))


def _assign_ops(selected: np.ndarray, occlusion_ratio: float, rng: np.random.Generator) -> List[Tuple[int, CorruptionOp]]:
    assignments = []
    for idx in selected:
        if occlusion_ratio >= 1.0 or rng.random() < occlusion_ratio:
            op = CorruptionOp.OCCLUSION
        else:
            op = NON_OCCLUSION_OPS[int(rng.integers(len(NON_OCCLUSION_OPS)))]
        assignments.append((int(idx), op))
    return assignments


def plan_static(grid: CubeGrid, policy: MaskPolicy, rng: np.random.Generator) -> MaskPlan:
    if policy.mode != "static":
        raise CorruptionError(f"plan_static needs a static policy, got mode '{policy.mode}'")
    count = corrupted_count(policy.subsample, len(grid))
    selected = np.sort(rng.choice(len(grid), size=count, replace=False))
    return MaskPlan(assignments=_assign_ops(selected, policy.occlusion_ratio, rng), sampled_fraction=policy.subsample)


def plan_dynamic(volume_dims, policy: MaskPolicy, rng: np.random.Generator) -> Tuple[CubeGrid, MaskPlan]:
    """
    One draw per call: a square in-plane side, a depth, and a fraction.

    Draws larger than the volume are clamped to the volume dims, keeping the
    in-plane side square.
    """
    if policy.mode != "dynamic":
        raise CorruptionError(f"plan_dynamic needs a dynamic policy, got mode '{policy.mode}'")
    dx, dy, dz = as_triple(volume_dims, "volume_dims", int)
    (side_lo, side_hi), (depth_lo, depth_hi) = policy.inplane_range, policy.depth_range
    if min(dx, dy) < side_lo or dz < depth_lo:
        raise CorruptionError(
            f"Volume dims {(dx, dy, dz)} smaller than the minimum cube dims {(side_lo, side_lo, depth_lo)}"
        )

    side = min(int(rng.integers(side_lo, side_hi + 1)), dx, dy)
    depth = min(int(rng.integers(depth_lo, depth_hi + 1)), dz)
    fraction = float(rng.uniform(*policy.subsample_range))

    grid = partition_cubes((dx, dy, dz), (side, side, depth))
    count = corrupted_count(fraction, len(grid))
    selected = np.sort(rng.choice(len(grid), size=count, replace=False))
    plan = MaskPlan(assignments=_assign_ops(selected, policy.occlusion_ratio, rng), sampled_fraction=fraction)
    logger.debug("Dynamic plan: cube %s, fraction %.3f, %d/%d cubes", grid.cube_dims, fraction, count, len(grid))
    return grid, plan


def plan_for(volume_dims, policy: MaskPolicy, rng: np.random.Generator) -> Tuple[CubeGrid, MaskPlan]:
    if policy.mode == "static":
        grid = partition_cubes(volume_dims, policy.cube_dims)
        return grid, plan_static(grid, policy, rng)
    return plan_dynamic(volume_dims, policy, rng)


# ----------------------------
# Application
# ----------------------------
def _validate_plan(grid: CubeGrid, plan: MaskPlan) -> None:
    indices = plan.cube_indices
    if len(set(indices)) != len(indices):
        raise CorruptionError("Plan assigns the same cube more than once")
    for idx in indices:
        if not 0 <= idx < len(grid):
            raise CorruptionError(f"Cube index {idx} outside grid of {len(grid)} cubes")


def _apply_op(block: np.ndarray, op: CorruptionOp) -> np.ndarray:
    if op == CorruptionOp.OCCLUSION:
        return np.full_like(block, OCCLUSION_FILL)
    if op == CorruptionOp.FLIP_HORIZONTAL:
        return block[::-1, :, :]
    if op == CorruptionOp.FLIP_VERTICAL:
        return block[:, ::-1, :]
    if op == CorruptionOp.ROTATION30:
        # each axial (x-y) slice rotated about the cube's in-plane centre
        return ndimage.rotate(
            block.astype(np.float64), ROTATION_DEGREES, axes=(0, 1), reshape=False,
            order=1, mode="constant", cval=OCCLUSION_FILL,
        ).astype(np.float32)
    raise CorruptionError(f"Unknown corruption op {op}")


def apply_plan(volume: Volume, grid: CubeGrid, plan: MaskPlan) -> Volume:
    if tuple(grid.volume_dims) != volume.dims:
        raise CorruptionError(f"Grid built for dims {grid.volume_dims}, volume has {volume.dims}")
    _validate_plan(grid, plan)
    out = volume.voxels.copy()
    for idx, op in plan.assignments:
        sl = grid.cubes[idx].slices
        out[sl] = _apply_op(volume.voxels[sl], CorruptionOp(op))
    return volume.with_voxels(out)


def plan_mask(grid: CubeGrid, plan: MaskPlan) -> np.ndarray:
    """Boolean [x, y, z] mask of voxels inside corrupted cubes."""
    _validate_plan(grid, plan)
    mask = np.zeros(grid.volume_dims, dtype=bool)
    for idx in plan.cube_indices:
        mask[grid.cubes[idx].slices] = True
    return mask


def corrupt(volume: Volume, policy: MaskPolicy, rng: np.random.Generator) -> Tuple[Volume, CubeGrid, MaskPlan]:
    grid, plan = plan_for(volume.dims, policy, rng)
    return apply_plan(volume, grid, plan), grid, plan


# ----------------------------
# Debug dumps
# ----------------------------
def plan_to_json(plan: MaskPlan, grid: CubeGrid = None) -> str:
    payload: Dict = {
        "assignments": [{"cube_index": i, "op": CorruptionOp(op).value} for i, op in plan.assignments],
        "sampled_fraction": plan.sampled_fraction,
    }
    if grid is not None:
        payload["cube_dims"] = list(grid.cube_dims)
        payload["volume_dims"] = list(grid.volume_dims)
    return json.dumps(payload, sort_keys=True)


def plan_from_json(text: str) -> MaskPlan:
    payload = json.loads(text)
    try:
        assignments = [(int(a["cube_index"]), CorruptionOp(a["op"])) for a in payload["assignments"]]
    except (KeyError, ValueError) as e:
        raise CorruptionError(f"Bad mask plan JSON: {e}") from e
    return MaskPlan(assignments=assignments, sampled_fraction=float(payload["sampled_fraction"]))
