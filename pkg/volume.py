# volume.py
"""
Volume representation, the on-disk file pair, and the preprocessing chain:
trilinear resampling -> percentile clipping -> min-max normalisation.

A Volume stores its voxels as a float32 array indexed [x, y, z]. Serialising
with order="F" makes x the fastest-varying axis, which is the disk layout.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy import ndimage

from config import VoxmimError, as_triple, round_half_up

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
HEADER_SUFFIX = ".json"
PAYLOAD_SUFFIX = ".raw"

# ProstateX-like acquisition grid: 0.5 x 0.5 mm in-plane, 3.6 mm slices
DEFAULT_TARGET_SPACING = (0.5, 0.5, 3.6)


class VolumeError(VoxmimError, ValueError):
    """Invalid volume contents or preprocessing arguments."""


class VolumeFormatError(VolumeError):
    """Header/payload pair on disk is missing or inconsistent."""


# ----------------------------
# Volume type
# ----------------------------
@dataclass(frozen=True, eq=False)
class Volume:
    voxels: np.ndarray
    spacing: Tuple[float, float, float]

    def __post_init__(self):
        voxels = np.asarray(self.voxels, dtype=np.float32)
        if voxels.ndim != 3 or min(voxels.shape) < 1:
            raise VolumeError(f"Volume needs a non-empty 3D voxel array, got shape {voxels.shape}")
        spacing = as_triple(self.spacing, "spacing")
        if any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise VolumeError(f"Spacing components must be strictly positive, got {spacing}")
        bad = first_non_finite(voxels)
        if bad is not None:
            raise VolumeError(f"Non-finite voxel value at linear index {bad}")
        object.__setattr__(self, "voxels", voxels)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.voxels.shape)

    @property
    def voxel_count(self) -> int:
        return int(self.voxels.size)

    def with_voxels(self, voxels: np.ndarray) -> "Volume":
        return Volume(voxels=voxels, spacing=self.spacing)

    def to_tensor(self) -> torch.Tensor:
        """Network layout (1, D, H, W) = (1, z, y, x)."""
        return torch.from_numpy(np.ascontiguousarray(self.voxels.transpose(2, 1, 0))).unsqueeze(0)

    @classmethod
    def from_tensor(cls, tensor: torch.Tensor, spacing) -> "Volume":
        array = tensor.detach().to(torch.float32).cpu().numpy()
        if array.ndim == 4:
            array = array[0]
        return cls(voxels=array.transpose(2, 1, 0), spacing=spacing)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Volume):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.voxels, other.voxels)


def first_non_finite(voxels: np.ndarray):
    """Linear (x-fastest) index of the first NaN/inf voxel, or None."""
    flat = np.asarray(voxels).ravel(order="F")
    bad = np.flatnonzero(~np.isfinite(flat))
    return int(bad[0]) if bad.size else None


# ----------------------------
# File pair I/O
# ----------------------------
def _pair_paths(path: PathLike) -> Tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (HEADER_SUFFIX, PAYLOAD_SUFFIX):
        path = path.with_suffix("")
    return path.with_name(path.name + HEADER_SUFFIX), path.with_name(path.name + PAYLOAD_SUFFIX)


def load_volume(path: PathLike) -> Volume:
    """
    Read `<name>.json` + `<name>.raw`.

    Args:
        path: either `<name>` or one of the two files of the pair.
    Returns:
        Volume with voxels decoded as little-endian float32, x-fastest.
    """
    header_path, payload_path = _pair_paths(path)
    for p in (header_path, payload_path):
        if not p.exists():
            raise VolumeFormatError(f"Missing volume file: {p}")

    try:
        header = json.loads(header_path.read_text(encoding="utf-8"))
        dims = as_triple(header["dims"], "dims", int)
        spacing = as_triple(header["spacing_mm"], "spacing_mm", float)
    except (KeyError, TypeError, ValueError) as e:
        raise VolumeFormatError(f"Bad volume header {header_path}: {e}") from e
    if header.get("dtype", "f32le") != "f32le" or header.get("order", "x-fastest") != "x-fastest":
        raise VolumeFormatError(f"Unsupported dtype/order in {header_path}: {header.get('dtype')}/{header.get('order')}")
    if any(d < 1 for d in dims):
        raise VolumeFormatError(f"Header dims must be positive, got {dims}")

    payload = payload_path.read_bytes()
    expected = 4 * dims[0] * dims[1] * dims[2]
    if len(payload) != expected:
        raise VolumeFormatError(
            f"Payload length mismatch for {payload_path}: expected {expected} bytes for dims {list(dims)}, got {len(payload)}"
        )

    voxels = np.frombuffer(payload, dtype="<f4").reshape(dims, order="F").astype(np.float32)
    return Volume(voxels=voxels, spacing=spacing)


def save_volume(volume: Volume, path: PathLike) -> Tuple[Path, Path]:
    """Write the header/payload pair; identical volumes give identical bytes."""
    header_path, payload_path = _pair_paths(path)
    header = {
        "dims": list(volume.dims),
        "spacing_mm": [float(s) for s in volume.spacing],
        "dtype": "f32le",
        "order": "x-fastest",
    }
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header_path.write_text(json.dumps(header, sort_keys=True) + "\n", encoding="utf-8")
    payload_path.write_bytes(volume.voxels.astype("<f4").ravel(order="F").tobytes())
    return header_path, payload_path


# ----------------------------
# Preprocessing
# ----------------------------
def resampled_dims(dims, spacing, target_spacing) -> Tuple[int, int, int]:
    return tuple(max(1, round_half_up(d * s / t)) for d, s, t in zip(dims, spacing, target_spacing))


def resample_trilinear(volume: Volume, target_spacing) -> Volume:
    """
    Trilinear resampling onto a grid of `target_spacing` mm.

    Voxel i sits at physical (i + 0.5) * spacing; samples that fall outside
    the input grid clamp to the nearest voxel centre.
    """
    target = as_triple(target_spacing, "target_spacing")
    if any(not np.isfinite(t) or t <= 0 for t in target):
        raise VolumeError(f"Target spacing must be strictly positive, got {target}")
    if target == volume.spacing:
        return volume.with_voxels(volume.voxels.copy())

    out_dims = resampled_dims(volume.dims, volume.spacing, target)
    axes = []
    for n_out, n_in, s_in, s_out in zip(out_dims, volume.dims, volume.spacing, target):
        centres = (np.arange(n_out, dtype=np.float64) + 0.5) * s_out
        axes.append(np.clip(centres / s_in - 0.5, 0.0, n_in - 1))
    coords = np.meshgrid(*axes, indexing="ij")

    resampled = ndimage.map_coordinates(volume.voxels.astype(np.float64), coords, order=1, mode="nearest")
    logger.debug("Resampled %s @ %s -> %s @ %s", volume.dims, volume.spacing, out_dims, target)
    return Volume(voxels=resampled.astype(np.float32), spacing=target)


def percentile(values: np.ndarray, q) -> np.ndarray:
    """Linear interpolation between closest ranks: rank = q/100 * (n - 1)."""
    return np.percentile(np.asarray(values, dtype=np.float64).ravel(), q, method="linear")


def clip_percentiles(volume: Volume, lo: float = 1.0, hi: float = 99.0) -> Volume:
    if not (0.0 <= lo <= 100.0 and 0.0 <= hi <= 100.0):
        raise VolumeError(f"Percentiles must lie in [0, 100], got lo={lo}, hi={hi}")
    if lo >= hi:
        raise VolumeError(f"Lower percentile must be below the upper one, got lo={lo}, hi={hi}")
    p_lo, p_hi = percentile(volume.voxels, [lo, hi])
    clipped = np.clip(volume.voxels.astype(np.float64), p_lo, p_hi)
    return volume.with_voxels(clipped.astype(np.float32))


def normalize_minmax(volume: Volume) -> Volume:
    """(v - min) / (max - min); a constant volume maps to all zeros."""
    values = volume.voxels.astype(np.float64)
    v_min, v_max = values.min(), values.max()
    if v_max == v_min:
        return volume.with_voxels(np.zeros_like(volume.voxels))
    return volume.with_voxels(((values - v_min) / (v_max - v_min)).astype(np.float32))


PipelineOrder = Literal["clip_first", "normalize_first"]


class PreprocessConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    target_spacing: Tuple[float, float, float] = DEFAULT_TARGET_SPACING
    lo: float = Field(1.0, ge=0.0, le=100.0)
    hi: float = Field(99.0, ge=0.0, le=100.0)
    # normalize_first follows the literal sentence order; its output spans
    # [p_lo, p_hi] of the normalised values instead of [0, 1]
    order: PipelineOrder = "clip_first"

    @field_validator("target_spacing")
    @classmethod
    def _positive_spacing(cls, v):
        if any(s <= 0 for s in v):
            raise ValueError("target_spacing components must be strictly positive")
        return v

    @model_validator(mode="after")
    def _ordered_percentiles(self):
        if self.lo >= self.hi:
            raise ValueError("lo must be below hi")
        return self


def preprocess(
    volume: Volume,
    target_spacing=DEFAULT_TARGET_SPACING,
    lo: float = 1.0,
    hi: float = 99.0,
    order: PipelineOrder = "clip_first",
) -> Volume:
    resampled = resample_trilinear(volume, target_spacing)
    if order == "clip_first":
        return normalize_minmax(clip_percentiles(resampled, lo, hi))
    if order == "normalize_first":
        return clip_percentiles(normalize_minmax(resampled), lo, hi)
    raise VolumeError(f"Unknown pipeline order '{order}', expected clip_first or normalize_first")


def preprocess_with(volume: Volume, cfg: PreprocessConfig) -> Volume:
    return preprocess(volume, cfg.target_spacing, cfg.lo, cfg.hi, cfg.order)
