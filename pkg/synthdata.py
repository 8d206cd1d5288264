# synthdata.py
"""
Synthetic prostate-like phantoms: smoothed noise background, a darker organ
ellipsoid and, for positive cases, a brighter lesion ellipsoid inside it.
Also the Gleason-score labelling rule and a dataset writer producing the
volume files and CSV manifests the rest of the pipeline consumes.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import ndimage
from tqdm import tqdm

from config import VoxmimError, derive_rng, round_half_up
from trainer import DatasetManifest, ManifestRecord, ManifestRole, write_manifest
from volume import Volume, save_volume

logger = logging.getLogger(__name__)

SIGNIFICANT_GLEASON = 7
GLEASON_RANGE = (2, 10)


class SynthError(VoxmimError, ValueError):
    """Invalid phantom config, Gleason list, or dataset request."""


# ----------------------------
# Labels
# ----------------------------
def derive_label(gleason_scores: Sequence[int]) -> int:
    """1 iff the highest-scored lesion has Gleason >= 7."""
    scores = list(gleason_scores)
    if not scores:
        raise SynthError("Gleason score list is empty")
    for s in scores:
        if int(s) != s or not GLEASON_RANGE[0] <= s <= GLEASON_RANGE[1]:
            raise SynthError(f"Gleason score {s} outside [{GLEASON_RANGE[0]}, {GLEASON_RANGE[1]}]")
    return int(max(scores) >= SIGNIFICANT_GLEASON)


def sample_gleason_scores(label: int, rng: np.random.Generator) -> List[int]:
    """One to three lesion scores whose highest agrees with `label`."""
    n = int(rng.integers(1, 4))
    if label == 1:
        scores = [int(rng.integers(7, 11))] + [int(rng.integers(6, 10)) for _ in range(n - 1)]
    else:
        scores = [int(rng.integers(3, 7)) for _ in range(n)]
    rng.shuffle(scores)
    return scores


# ----------------------------
# Config
# ----------------------------
class PhantomConfig(BaseModel):
    """
    Geometry in mm, intensities in [0, 1]. Texture is unit-variance white
    noise box-blurred `smoothing_passes` times with a `smoothing_width` kernel,
    renormalised and scaled by `texture_scale`.
    """

    model_config = ConfigDict(extra="forbid")

    dims: Tuple[int, int, int] = (32, 32, 16)
    spacing: Tuple[float, float, float] = (0.5, 0.5, 3.6)
    texture_scale: float = Field(0.05, ge=0.0)
    smoothing_width: int = Field(3, ge=1)
    smoothing_passes: int = Field(3, ge=0)
    background_level: float = Field(0.6, ge=0.0, le=1.0)
    organ_level: float = Field(0.35, ge=0.0, le=1.0)
    organ_radii_inplane: Tuple[float, float] = (5.5, 6.5)
    organ_radii_depth: Tuple[float, float] = (16.0, 20.0)
    organ_jitter: float = Field(1.0, ge=0.0)
    # pinned calibration: lesions brighter than the background
    lesion_radii_inplane: Tuple[float, float] = (3.0, 4.0)
    lesion_radii_depth: Tuple[float, float] = (8.0, 12.0)
    lesion_delta: float = Field(0.6, gt=0.0, le=1.0)
    balance: float = Field(0.5, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _check_geometry(self):
        if min(self.dims) < 1 or min(self.spacing) <= 0:
            raise ValueError("dims and spacing must be positive")
        ranges = {
            "organ_radii_inplane": self.organ_radii_inplane,
            "organ_radii_depth": self.organ_radii_depth,
            "lesion_radii_inplane": self.lesion_radii_inplane,
            "lesion_radii_depth": self.lesion_radii_depth,
        }
        for name, (lo, hi) in ranges.items():
            if not 0 < lo < hi:
                raise ValueError(f"{name} must satisfy 0 < lo < hi, got {(lo, hi)}")
        if self.lesion_radii_inplane[1] >= self.organ_radii_inplane[0] or self.lesion_radii_depth[1] >= self.organ_radii_depth[0]:
            raise ValueError("largest lesion must fit inside the smallest organ")
        half = [d * s / 2.0 for d, s in zip(self.dims, self.spacing)]
        if self.organ_radii_inplane[1] + self.organ_jitter > min(half[0], half[1]) or self.organ_radii_depth[1] + self.organ_jitter > half[2]:
            raise ValueError(f"organ ellipsoid does not fit a {half[0] * 2:.1f} x {half[1] * 2:.1f} x {half[2] * 2:.1f} mm field of view")
        return self


@dataclass(frozen=True)
class Phantom:
    volume: Volume
    organ_mask: np.ndarray
    lesion_mask: np.ndarray


# ----------------------------
# Phantoms
# ----------------------------
def _smoothed_noise(config: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    field = rng.normal(0.0, 1.0, size=config.dims)
    for _ in range(config.smoothing_passes):
        field = ndimage.uniform_filter(field, size=config.smoothing_width, mode="reflect")
    std = field.std()
    return field / std if std > 0 else field


def _ellipsoid(config: PhantomConfig, centre: np.ndarray, radii: np.ndarray) -> np.ndarray:
    axes = [(np.arange(d) + 0.5) * s for d, s in zip(config.dims, config.spacing)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    dist = ((gx - centre[0]) / radii[0]) ** 2 + ((gy - centre[1]) / radii[1]) ** 2 + ((gz - centre[2]) / radii[2]) ** 2
    return dist <= 1.0


def _snap_to_voxel_centre(config: PhantomConfig, point: np.ndarray) -> np.ndarray:
    spacing = np.asarray(config.spacing)
    idx = np.clip(np.floor(point / spacing), 0, np.asarray(config.dims) - 1)
    return (idx + 0.5) * spacing


def generate_phantom_with_masks(config: PhantomConfig, label: int, rng: np.random.Generator) -> Phantom:
    """
    Lesion draws come last, so a label-0 and a label-1 phantom from equal
    generator states differ only inside the lesion.
    """
    if label not in (0, 1):
        raise SynthError(f"label must be 0 or 1, got {label}")
    spacing = np.asarray(config.spacing)
    extent = np.asarray(config.dims) * spacing

    texture = config.texture_scale * _smoothed_noise(config, rng)
    organ_centre = extent / 2.0 + rng.uniform(-config.organ_jitter, config.organ_jitter, size=3)
    r_in = rng.uniform(*config.organ_radii_inplane, size=2)
    organ_radii = np.array([r_in[0], r_in[1], rng.uniform(*config.organ_radii_depth)])
    organ = _ellipsoid(config, organ_centre, organ_radii)

    values = np.where(organ, config.organ_level, config.background_level) + texture
    lesion = np.zeros(config.dims, dtype=bool)
    if label == 1:
        lesion_radii = np.array([
            rng.uniform(*config.lesion_radii_inplane),
            rng.uniform(*config.lesion_radii_inplane),
            rng.uniform(*config.lesion_radii_depth),
        ])
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        offset = direction * rng.uniform(0.0, 1.0) ** (1.0 / 3.0) * 0.5 * (organ_radii - lesion_radii)
        centre = _snap_to_voxel_centre(config, organ_centre + offset)
        lesion = _ellipsoid(config, centre, lesion_radii) & organ
        values = values + config.lesion_delta * lesion

    voxels = np.clip(values, 0.0, 1.0).astype(np.float32)
    return Phantom(Volume(voxels=voxels, spacing=config.spacing), organ, lesion)


def generate_phantom(config: PhantomConfig, label: int, rng: np.random.Generator) -> Volume:
    return generate_phantom_with_masks(config, label, rng).volume


# ----------------------------
# Dataset
# ----------------------------
def generate_dataset(
    config: PhantomConfig,
    n_unlabeled: int,
    n_labeled: int,
    balance: float,
    rng: np.random.Generator,
    out_dir: Union[str, Path],
    progress: bool = True,
) -> Tuple[DatasetManifest, DatasetManifest]:
    """
    Write `volumes/<id>.{json,raw}`, `unlabeled.csv`, `labeled.csv` and
    `lesions.csv` under `out_dir`.

    Every phantom draws from its own stream derived from one master value
    taken from `rng`, so the directory is byte-identical per seed.
    """
    if n_unlabeled < 0 or n_labeled < 0:
        raise SynthError(f"Counts must be >= 0, got unlabeled={n_unlabeled}, labeled={n_labeled}")
    if not 0.0 <= balance <= 1.0:
        raise SynthError(f"balance must lie in [0, 1], got {balance}")
    out_dir = Path(out_dir)
    vol_dir = out_dir / "volumes"
    vol_dir.mkdir(parents=True, exist_ok=True)
    master = int(rng.integers(0, 2 ** 62))

    n_pos = round_half_up(balance * n_labeled)
    labels = np.array([1] * n_pos + [0] * (n_labeled - n_pos), dtype=np.int64)
    derive_rng(master, "synth", "labels").shuffle(labels)

    unlabeled, labeled, lesion_rows = [], [], []
    jobs = [("unlabeled", i) for i in range(n_unlabeled)] + [("labeled", i) for i in range(n_labeled)]
    for role, i in tqdm(jobs, desc="Generating phantoms", disable=not progress):
        case_rng = derive_rng(master, "synth", role, i)
        if role == "unlabeled":
            case_id = f"u{i:04d}"
            label = int(case_rng.random() < balance)
        else:
            case_id = f"l{i:04d}"
            scores = sample_gleason_scores(int(labels[i]), case_rng)
            label = derive_label(scores)
            lesion_rows.append({"id": case_id, "gleason_scores": ";".join(str(s) for s in scores)})
        volume = generate_phantom(config, label, case_rng)
        save_volume(volume, vol_dir / case_id)
        record = ManifestRecord(case_id, vol_dir / case_id, label if role == "labeled" else None)
        (labeled if role == "labeled" else unlabeled).append(record)

    unlabeled_manifest = DatasetManifest(tuple(unlabeled), ManifestRole.UNLABELED)
    labeled_manifest = DatasetManifest(tuple(labeled), ManifestRole.LABELED)
    write_manifest(unlabeled_manifest, out_dir / "unlabeled.csv")
    write_manifest(labeled_manifest, out_dir / "labeled.csv")
    pd.DataFrame(lesion_rows, columns=["id", "gleason_scores"]).to_csv(out_dir / "lesions.csv", index=False, lineterminator="\n")

    logger.info(f"Wrote {n_unlabeled} unlabeled and {n_labeled} labeled phantoms ({n_pos} positive) to {out_dir}")
    return unlabeled_manifest, labeled_manifest
