# trainer.py
"""
Dataset manifests, stratified splitting / label-fraction sampling, the
masked-image-modelling pre-training loop, downstream training, and
checkpoint I/O.

Randomness is threaded explicitly: splitting and sampling take a numpy
Generator, training loops derive every stream (shuffle order, per-volume
corruption) from TrainConfig.seed, so identical inputs give bit-identical
parameters whatever the DataLoader prefetch schedule.
"""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, ConfigDict, Field
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

import neuralops as ops
from architecture import (
    Classifier,
    ClassifierMode,
    Encoder,
    MaskedAutoencoder,
    ModelConfig,
    reconstruct,
)
from config import VoxmimError, derive_rng, round_half_up, torch_generator
from corruption import MaskPolicy, corrupt, plan_mask
from metrics import PredictionSet
from volume import Volume, load_volume

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
PathLike = Union[str, Path]


class TrainingError(VoxmimError, ValueError):
    """Bad manifest, config, or training input."""


class ManifestError(TrainingError):
    """Manifest CSV row or record is invalid."""


class NonFiniteLossError(TrainingError):
    """Loss became NaN/inf during training."""


class CheckpointError(VoxmimError, ValueError):
    """Checkpoint pair missing, truncated, or from another format version."""


# ----------------------------
# Manifests
# ----------------------------
class ManifestRole(str, Enum):
    UNLABELED = "unlabeled"
    LABELED = "labeled"


@dataclass(frozen=True)
class ManifestRecord:
    case_id: str
    volume: Path
    label: Optional[int] = None


@dataclass(frozen=True)
class DatasetManifest:
    records: Tuple[ManifestRecord, ...]
    role: ManifestRole

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "role", ManifestRole(self.role))
        seen = set()
        for row, rec in enumerate(self.records, start=1):
            if rec.case_id in seen:
                raise ManifestError(f"Duplicate case id '{rec.case_id}' (record {row})")
            seen.add(rec.case_id)
            if self.role == ManifestRole.UNLABELED and rec.label is not None:
                raise ManifestError(f"Unlabeled manifest carries a label for '{rec.case_id}' (record {row})")
            if self.role == ManifestRole.LABELED and rec.label not in (0, 1):
                raise ManifestError(f"Labeled manifest needs a 0/1 label for '{rec.case_id}' (record {row})")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def ids(self) -> List[str]:
        return [r.case_id for r in self.records]

    @property
    def labels(self) -> List[int]:
        return [r.label for r in self.records]

    def subset(self, ids) -> "DatasetManifest":
        wanted = set(ids)
        return DatasetManifest(tuple(r for r in self.records if r.case_id in wanted), self.role)

    def unlabeled_view(self) -> "DatasetManifest":
        """Same volumes with labels stripped, usable for pre-training."""
        return DatasetManifest(tuple(replace(r, label=None) for r in self.records), ManifestRole.UNLABELED)

    def class_ids(self) -> Dict[int, List[str]]:
        groups: Dict[int, List[str]] = {0: [], 1: []}
        for r in self.records:
            groups[r.label].append(r.case_id)
        return groups


def read_manifest(path: PathLike, role: Optional[Union[ManifestRole, str]] = None) -> DatasetManifest:
    """
    Read a `id,volume,label` CSV. Volume paths resolve relative to the CSV.

    The role is inferred from the label column when not given: all empty ->
    unlabeled, all present -> labeled, anything else is a row error.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"Manifest not found: {path}")
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = {"id", "volume", "label"} - set(df.columns)
    if missing:
        raise ManifestError(f"Manifest {path} lacks columns {sorted(missing)}")

    records = []
    for i, row in enumerate(df.itertuples(index=False), start=1):
        case_id, volume, label = row.id.strip(), row.volume.strip(), row.label.strip()
        if not case_id or not volume:
            raise ManifestError(f"{path} row {i}: empty id or volume")
        if label == "":
            parsed = None
        elif label in ("0", "1"):
            parsed = int(label)
        else:
            raise ManifestError(f"{path} row {i}: label must be 0, 1 or empty, got '{label}'")
        vol_path = Path(volume)
        records.append(ManifestRecord(case_id, vol_path if vol_path.is_absolute() else path.parent / vol_path, parsed))

    if role is None:
        has = [r.label is not None for r in records]
        if all(has) and records:
            role = ManifestRole.LABELED
        elif not any(has):
            role = ManifestRole.UNLABELED
        else:
            first = has.index(False) if has[0] else has.index(True)
            raise ManifestError(f"{path} row {first + 1}: manifest mixes labeled and unlabeled rows")
    return DatasetManifest(tuple(records), ManifestRole(role))


def write_manifest(manifest: DatasetManifest, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for r in manifest.records:
        try:
            vol = r.volume.resolve().relative_to(path.parent.resolve())
        except ValueError:
            vol = r.volume
        rows.append({"id": r.case_id, "volume": vol.as_posix(), "label": "" if r.label is None else str(r.label)})
    pd.DataFrame(rows, columns=["id", "volume", "label"]).to_csv(path, index=False, lineterminator="\n")
    return path


# ----------------------------
# Splitting / sampling
# ----------------------------
def _require_labeled(manifest: DatasetManifest, op: str) -> Dict[int, List[str]]:
    if manifest.role != ManifestRole.LABELED:
        raise TrainingError(f"{op} needs a labeled manifest")
    groups = manifest.class_ids()
    for label, ids in groups.items():
        if not ids:
            raise TrainingError(f"{op}: class {label} has no members")
    return groups


def split_labeled(manifest: DatasetManifest, train_fraction: float, rng: np.random.Generator) -> Tuple[DatasetManifest, DatasetManifest]:
    """Stratified train/test split; per class round-half-up(fraction * size) go to train."""
    if not 0.0 < train_fraction < 1.0:
        raise TrainingError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    groups = _require_labeled(manifest, "split_labeled")
    train_ids = set()
    for label in sorted(groups):
        ids = groups[label]
        order = rng.permutation(len(ids))
        n_train = round_half_up(train_fraction * len(ids))
        train_ids.update(ids[j] for j in order[:n_train])
    train = DatasetManifest(tuple(r for r in manifest.records if r.case_id in train_ids), manifest.role)
    test = DatasetManifest(tuple(r for r in manifest.records if r.case_id not in train_ids), manifest.role)
    return train, test


def sample_label_fraction(train: DatasetManifest, fraction: float, rng: np.random.Generator) -> DatasetManifest:
    """Stratified subset without replacement, at least one case per class."""
    if not 0.0 < fraction <= 1.0:
        raise TrainingError(f"Label fraction must lie in (0, 1], got {fraction}")
    groups = _require_labeled(train, "sample_label_fraction")
    if fraction == 1.0:
        return DatasetManifest(train.records, train.role)
    keep = set()
    for label in sorted(groups):
        ids = groups[label]
        n = min(len(ids), max(1, round_half_up(fraction * len(ids))))
        keep.update(ids[j] for j in rng.choice(len(ids), size=n, replace=False))
    return train.subset(keep)


# ----------------------------
# Config
# ----------------------------
class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(50, ge=1)
    batch_size: int = Field(4, ge=1)
    lr: float = Field(1e-4, gt=0.0)
    head_lr: Optional[float] = Field(None, gt=0.0)  # classifier head only; None = lr
    seed: int = Field(0, ge=0)
    masked_loss_only: bool = False
    early_stop_patience: Optional[int] = Field(None, ge=1)
    num_workers: int = Field(0, ge=0)
    progress: bool = True


class DownstreamConfig(TrainConfig):
    """Classifier training: shorter schedule, head stepping faster than the encoder."""

    epochs: int = Field(30, ge=1)
    head_lr: Optional[float] = Field(1e-2, gt=0.0)


# ----------------------------
# Datasets
# ----------------------------
class VolumeDataset(Dataset):
    """Loads manifest volumes once and serves them in network layout (1, D, H, W)."""

    def __init__(self, manifest: DatasetManifest, model_config: ModelConfig):
        self.manifest = manifest
        self.model_config = model_config
        self._cache: Dict[int, Volume] = {}

    def __len__(self) -> int:
        return len(self.manifest)

    def volume(self, index: int) -> Volume:
        if index not in self._cache:
            rec = self.manifest.records[index]
            vol = load_volume(rec.volume)
            if vol.dims != tuple(self.model_config.input_dims):
                raise TrainingError(
                    f"Case '{rec.case_id}' has dims {vol.dims}, model expects {tuple(self.model_config.input_dims)}"
                )
            self._cache[index] = vol
        return self._cache[index]

    def __getitem__(self, index: int):
        rec = self.manifest.records[index]
        label = torch.tensor(float(rec.label)) if rec.label is not None else torch.tensor(float("nan"))
        return self.volume(index).to_tensor(), label


class CorruptedVolumeDataset(VolumeDataset):
    """
    Serves (corrupted, clean, mask) triples. The corruption RNG for a case
    derives from (seed, epoch, index), so a fresh plan is drawn per volume
    and per epoch independently of worker scheduling.
    """

    def __init__(self, manifest: DatasetManifest, model_config: ModelConfig, policy: MaskPolicy, seed: int):
        super().__init__(manifest, model_config)
        self.policy = policy
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __getitem__(self, index: int):
        clean = self.volume(index)
        rng = derive_rng(self.seed, "pretrain", "corrupt", self.epoch, index)
        corrupted, grid, plan = corrupt(clean, self.policy, rng)
        mask = torch.from_numpy(np.ascontiguousarray(plan_mask(grid, plan).transpose(2, 1, 0))).unsqueeze(0)
        return corrupted.to_tensor(), clean.to_tensor(), mask


def _loader(dataset: Dataset, config: TrainConfig, stream: str, epoch: int) -> DataLoader:
    # shuffle order depends only on (seed, stream, epoch)
    return DataLoader(
        dataset,
        batch_size=config.batch_size,
        shuffle=True,
        drop_last=False,
        num_workers=config.num_workers,
        generator=torch_generator(config.seed, stream, "shuffle", epoch),
    )


def _check_finite(loss: torch.Tensor, phase: str, epoch: int) -> None:
    if not math.isfinite(loss.item()):
        raise NonFiniteLossError(f"{phase}: non-finite loss {loss.item()} at epoch {epoch + 1}")


def _should_stop(history: List[float], patience: Optional[int]) -> bool:
    if patience is None or len(history) <= patience:
        return False
    best_before = min(history[:-patience])
    return min(history[-patience:]) >= best_before


# ----------------------------
# Training loops
# ----------------------------
def build_optimizer(model: Union[MaskedAutoencoder, Classifier], config: TrainConfig) -> torch.optim.Adam:
    """Adam over the trainable parameters; a classifier head runs at `head_lr` when set."""
    if isinstance(model, Classifier) and config.head_lr is not None:
        head = model.head_parameters()
        head_ids = {id(p) for p in head}
        body = [p for p in model.parameters() if id(p) not in head_ids]
        return ops.make_adam([{"params": body}, {"params": head, "lr": config.head_lr}], lr=config.lr)
    return ops.make_adam(model.parameters(), lr=config.lr)


def _epochs_left(history: List[float], config: TrainConfig, phase: str) -> range:
    if len(history) >= config.epochs:
        logger.info(f"{phase}: {len(history)} of {config.epochs} epochs already done, nothing to resume")
    elif history:
        logger.info(f"{phase}: resuming at epoch {len(history) + 1}/{config.epochs}")
    return range(len(history), config.epochs)


def pretrain(
    mae: MaskedAutoencoder,
    unlabeled: DatasetManifest,
    policy: MaskPolicy,
    config: TrainConfig,
    optimizer: Optional[torch.optim.Adam] = None,
    history: Optional[List[float]] = None,
) -> Tuple[MaskedAutoencoder, List[float]]:
    """
    Masked image modelling: corrupt each volume, reconstruct, MSE against the
    clean volume, Adam step. Returns the model and the per-epoch mean loss.

    Pass the `optimizer` (see restore_optimizer) and the loss `history` of an
    interrupted run to continue it; training then runs from epoch
    len(history) up to config.epochs and matches an uninterrupted run.
    """
    if unlabeled.role != ManifestRole.UNLABELED:
        raise TrainingError("pretrain takes an unlabeled manifest (use unlabeled_view() to strip labels)")
    if len(unlabeled) == 0:
        raise TrainingError("pretrain: empty manifest")

    dataset = CorruptedVolumeDataset(unlabeled, mae.config, policy, config.seed)
    optimizer = optimizer or build_optimizer(mae, config)
    history = list(history or [])
    if _should_stop(history, config.early_stop_patience):
        return mae, history

    logger.info(f"Pre-training on {len(unlabeled)} volumes for {config.epochs} epochs ({policy.mode} masking)")
    epochs = _epochs_left(history, config, "pretrain")
    for epoch in tqdm(epochs, desc="Pre-training", disable=not config.progress):
        dataset.set_epoch(epoch)
        total, seen = 0.0, 0
        for corrupted, clean, mask in _loader(dataset, config, "pretrain", epoch):
            out = reconstruct(mae, corrupted, "train")
            loss = ops.mse_loss(out, clean, mask if config.masked_loss_only else None)
            _check_finite(loss, "pretrain", epoch)
            optimizer.zero_grad()
            ops.backward(loss)
            ops.adam_step(optimizer)
            total += loss.item() * corrupted.shape[0]
            seen += corrupted.shape[0]
        history.append(total / seen)
        logger.info(f"Pre-train epoch {epoch + 1}/{config.epochs}: mean MSE {history[-1]:.6f}")
        if _should_stop(history, config.early_stop_patience):
            logger.info(f"Early stop after epoch {epoch + 1}")
            break
    return mae, history


def train_downstream(
    classifier: Classifier,
    labeled_subset: DatasetManifest,
    config: TrainConfig,
    optimizer: Optional[torch.optim.Adam] = None,
    history: Optional[List[float]] = None,
) -> Tuple[Classifier, List[float]]:
    """
    BCE + Adam over the trainable parameters (head only for linear probing).
    `optimizer` / `history` resume an interrupted run as in pretrain.
    """
    for row, rec in enumerate(labeled_subset.records, start=1):
        if rec.label is None:
            raise TrainingError(f"train_downstream: record {row} ('{rec.case_id}') has no label")
    if len(labeled_subset) == 0:
        raise TrainingError("train_downstream: empty manifest")

    dataset = VolumeDataset(labeled_subset, classifier.config)
    optimizer = optimizer or build_optimizer(classifier, config)
    history = list(history or [])
    if _should_stop(history, config.early_stop_patience):
        classifier.eval()
        return classifier, history

    logger.info(
        f"Training {classifier.mode.value} classifier on {len(labeled_subset)} cases for {config.epochs} epochs"
    )
    epochs = _epochs_left(history, config, "train_downstream")
    for epoch in tqdm(epochs, desc=f"Downstream ({classifier.mode.value})", disable=not config.progress):
        classifier.train()
        total, seen = 0.0, 0
        for batch, labels in _loader(dataset, config, "downstream", epoch):
            probs = classifier(batch)
            loss = ops.bce_loss(probs, labels)
            _check_finite(loss, "train_downstream", epoch)
            optimizer.zero_grad()
            ops.backward(loss)
            ops.adam_step(optimizer)
            total += loss.item() * batch.shape[0]
            seen += batch.shape[0]
        history.append(total / seen)
        logger.info(f"Downstream epoch {epoch + 1}/{config.epochs}: mean BCE {history[-1]:.6f}")
        if _should_stop(history, config.early_stop_patience):
            logger.info(f"Early stop after epoch {epoch + 1}")
            break
    classifier.eval()
    return classifier, history


@torch.no_grad()
def predict_manifest(classifier: Classifier, manifest: DatasetManifest, batch_size: int = 8) -> PredictionSet:
    """Eval-mode probabilities for every case of a labeled manifest."""
    if manifest.role != ManifestRole.LABELED:
        raise TrainingError("predict_manifest needs labels to build a PredictionSet")
    dataset = VolumeDataset(manifest, classifier.config)
    classifier.eval()
    scores = []
    for start in range(0, len(dataset), batch_size):
        batch = torch.stack([dataset[i][0] for i in range(start, min(start + batch_size, len(dataset)))])
        scores.extend(classifier(batch).double().tolist())
    return PredictionSet.from_arrays(manifest.ids, manifest.labels, scores)


def write_loss_history(history: List[float], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame({"epoch": range(1, len(history) + 1), "loss": [repr(float(v)) for v in history]})
    df.to_csv(path, index=False, lineterminator="\n")
    return path


# ----------------------------
# Checkpoints
# ----------------------------
@dataclass
class Checkpoint:
    kind: str
    model_config: ModelConfig
    tensors: Dict[str, np.ndarray]
    classifier_mode: Optional[str] = None
    optimizer_state: Optional[Dict[str, np.ndarray]] = None
    metadata: Dict = field(default_factory=dict)


def checkpoint_paths(path: PathLike) -> Tuple[Path, Path]:
    path = Path(path)
    name = path.name
    for suffix in (".ckpt.json", ".ckpt.raw"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
    return path.with_name(name + ".ckpt.json"), path.with_name(name + ".ckpt.raw")


def _float_state(model: torch.nn.Module) -> Dict[str, torch.Tensor]:
    return {k: v for k, v in model.state_dict().items() if v.is_floating_point()}


def save_checkpoint(
    model: Union[MaskedAutoencoder, Classifier],
    path: PathLike,
    metadata: Optional[Dict] = None,
    optimizer: Optional[torch.optim.Adam] = None,
) -> Tuple[Path, Path]:
    """
    Write `<name>.ckpt.json` (config, tensor table, metadata) and
    `<name>.ckpt.raw` (little-endian float32 tensors in state_dict order,
    then Adam moments when an optimiser is given).
    """
    header_path, blob_path = checkpoint_paths(path)
    entries, chunks = [], []
    for name, t in _float_state(model).items():
        entries.append({"name": name, "shape": list(t.shape)})
        chunks.append(t.detach().cpu().numpy().astype("<f4").ravel())

    opt_entries = []
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for p, first, second in ops.adam_state_arrays(optimizer):
            for key, moment in (("exp_avg", first), ("exp_avg_sq", second)):
                opt_entries.append({"name": f"{names[id(p)]}:{key}", "shape": list(p.shape)})
                chunks.append(moment.detach().cpu().numpy().astype("<f4").ravel())

    blob = np.concatenate(chunks).astype("<f4").tobytes() if chunks else b""
    header = {
        "version": CHECKPOINT_VERSION,
        "kind": "classifier" if isinstance(model, Classifier) else "mae",
        "model_config": model.config.model_dump(mode="json"),
        "classifier_mode": model.mode.value if isinstance(model, Classifier) else None,
        "tensors": entries,
        "optimizer_tensors": opt_entries,
        "optimizer_steps": ops.adam_steps_taken(optimizer) if optimizer is not None else None,
        "blob_bytes": len(blob),
        "metadata": metadata or {},
    }
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header_path.write_text(json.dumps(header, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    blob_path.write_bytes(blob)
    logger.debug(f"Saved checkpoint {header_path} ({len(blob)} bytes)")
    return header_path, blob_path


def read_checkpoint(path: PathLike) -> Checkpoint:
    header_path, blob_path = checkpoint_paths(path)
    for p in (header_path, blob_path):
        if not p.exists():
            raise CheckpointError(f"Missing checkpoint file: {p}")
    try:
        header = json.loads(header_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"Unreadable checkpoint header {header_path}: {e}") from e
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"Checkpoint version {header.get('version')} != supported {CHECKPOINT_VERSION}")

    blob = blob_path.read_bytes()
    expected = 4 * sum(int(np.prod(e["shape"])) for e in header["tensors"] + header.get("optimizer_tensors", []))
    if len(blob) != expected or header.get("blob_bytes") != expected:
        raise CheckpointError(f"Checkpoint blob length mismatch: expected {expected} bytes, found {len(blob)}")

    values = np.frombuffer(blob, dtype="<f4")
    tensors, opt_state, offset = {}, {}, 0
    for target, entries in ((tensors, header["tensors"]), (opt_state, header.get("optimizer_tensors", []))):
        for e in entries:
            n = int(np.prod(e["shape"]))
            target[e["name"]] = values[offset: offset + n].reshape(e["shape"]).astype(np.float32)
            offset += n

    return Checkpoint(
        kind=header["kind"],
        model_config=ModelConfig.model_validate(header["model_config"]),
        tensors=tensors,
        classifier_mode=header.get("classifier_mode"),
        optimizer_state=opt_state or None,
        metadata=header.get("metadata", {}),
    )


def load_checkpoint(path: PathLike) -> Union[MaskedAutoencoder, Classifier]:
    """Rebuild the model and restore every saved tensor bit-exactly."""
    ckpt = read_checkpoint(path)
    gen = torch.Generator().manual_seed(0)  # placeholder init, overwritten below
    if ckpt.kind == "mae":
        model = MaskedAutoencoder(ckpt.model_config, gen)
    elif ckpt.kind == "classifier":
        model = Classifier(ckpt.model_config, Encoder(ckpt.model_config, gen), ClassifierMode(ckpt.classifier_mode), gen)
    else:
        raise CheckpointError(f"Unknown checkpoint kind '{ckpt.kind}'")

    expected = _float_state(model)
    if set(expected) != set(ckpt.tensors):
        raise CheckpointError(f"Checkpoint tensors do not match a {ckpt.kind} built from its config")
    state = {}
    for name, ref in expected.items():
        arr = ckpt.tensors[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(f"Tensor '{name}' has shape {arr.shape}, model expects {tuple(ref.shape)}")
        state[name] = torch.from_numpy(arr.copy())
    model.load_state_dict(state, strict=True)
    model.eval()
    model.metadata = ckpt.metadata
    return model


def restore_optimizer(path: PathLike, model: torch.nn.Module, optimizer: torch.optim.Adam) -> None:
    """Load saved Adam moments into `optimizer` (built over `model`)."""
    ckpt = read_checkpoint(path)
    if not ckpt.optimizer_state:
        raise CheckpointError(f"Checkpoint {path} holds no optimizer state")
    header = json.loads(checkpoint_paths(path)[0].read_text(encoding="utf-8"))
    steps = header.get("optimizer_steps") or 0
    params = dict(model.named_parameters())
    owned = {id(p) for group in optimizer.param_groups for p in group["params"]}
    for key in sorted({k.rsplit(":", 1)[0] for k in ckpt.optimizer_state}):
        p = params.get(key)
        if p is None or id(p) not in owned:
            raise CheckpointError(f"Saved optimizer state for '{key}' has no matching trainable parameter")
        optimizer.state[p] = {
            "step": torch.tensor(float(steps)),
            "exp_avg": torch.from_numpy(ckpt.optimizer_state[f"{key}:exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(ckpt.optimizer_state[f"{key}:exp_avg_sq"].copy()),
        }
