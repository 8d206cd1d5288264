# test_trainer.py
from pathlib import Path

import numpy as np
import pytest
import torch

import trainer
from architecture import ModelConfig, build_classifier, build_mae
from corruption import MaskPolicy
from synthdata import PhantomConfig, generate_dataset
from trainer import (
    CheckpointError,
    DatasetManifest,
    ManifestError,
    ManifestRecord,
    ManifestRole,
    NonFiniteLossError,
    TrainConfig,
    TrainingError,
    build_optimizer,
    checkpoint_paths,
    load_checkpoint,
    pretrain,
    read_checkpoint,
    read_manifest,
    restore_optimizer,
    sample_label_fraction,
    save_checkpoint,
    split_labeled,
    train_downstream,
    write_manifest,
)
from volume import Volume, save_volume

TINY = ModelConfig(input_dims=(8, 8, 4), base_channels=2, stages=2, convs_per_stage=(1, 1))
TINY_POLICY = MaskPolicy.dynamic(inplane_range=(2, 8), depth_range=(1, 4))


def _labeled(n_pos: int, n_neg: int) -> DatasetManifest:
    labels = [1] * n_pos + [0] * n_neg
    return DatasetManifest(
        tuple(ManifestRecord(f"c{i:03d}", Path(f"c{i:03d}"), label) for i, label in enumerate(labels)),
        ManifestRole.LABELED,
    )


def _write_volumes(tmp_path: Path, labels, seed=0) -> DatasetManifest:
    rng = np.random.default_rng(seed)
    records = []
    for i, label in enumerate(labels):
        voxels = rng.uniform(0.0, 0.5, size=TINY.input_dims)
        if label == 1:
            voxels[2:6, 2:6, 1:3] += 0.5
        save_volume(Volume(voxels.astype(np.float32), (1.0, 1.0, 2.0)), tmp_path / f"v{i}")
        records.append(ManifestRecord(f"v{i}", tmp_path / f"v{i}", label))
    role = ManifestRole.UNLABELED if labels[0] is None else ManifestRole.LABELED
    return DatasetManifest(tuple(records), role)


def _fast(**overrides) -> TrainConfig:
    return TrainConfig(**{"epochs": 2, "batch_size": 2, "seed": 0, "progress": False, **overrides})


# ----------------------------
# Manifests
# ----------------------------
def test_manifest_round_trip(tmp_path):
    manifest = _write_volumes(tmp_path, [1, 0, 1])
    path = write_manifest(manifest, tmp_path / "labeled.csv")
    assert path.read_text().splitlines()[0] == "id,volume,label"
    loaded = read_manifest(path)
    assert loaded.role == ManifestRole.LABELED
    assert loaded.ids == manifest.ids and loaded.labels == [1, 0, 1]
    assert [r.volume.resolve() for r in loaded.records] == [r.volume.resolve() for r in manifest.records]


def test_manifest_bad_label_names_row(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("id,volume,label\na,a,1\nb,b,2\n")
    with pytest.raises(ManifestError, match="row 2"):
        read_manifest(path)


def test_manifest_mixing_labeled_and_unlabeled_rows(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("id,volume,label\na,a,1\nb,b,\n")
    with pytest.raises(ManifestError, match="mixes"):
        read_manifest(path)


def test_unlabeled_manifest_cannot_carry_labels():
    with pytest.raises(ManifestError):
        DatasetManifest((ManifestRecord("a", Path("a"), 1),), ManifestRole.UNLABELED)
    assert all(r.label is None for r in _labeled(2, 2).unlabeled_view().records)


def test_duplicate_ids_rejected():
    with pytest.raises(ManifestError, match="Duplicate"):
        DatasetManifest((ManifestRecord("a", Path("a"), 1), ManifestRecord("a", Path("b"), 0)), ManifestRole.LABELED)


# ----------------------------
# Splitting / sampling
# ----------------------------
def test_split_is_an_exact_stratified_partition():
    manifest = _labeled(60, 144)
    train, test = split_labeled(manifest, 0.70, np.random.default_rng(0))
    assert len(train) == 143 and len(test) == 61
    assert set(train.ids).isdisjoint(test.ids)
    assert set(train.ids) | set(test.ids) == set(manifest.ids)
    assert sum(train.labels) == 42 and sum(test.labels) == 18


def test_split_rounds_half_up_per_class():
    train, test = split_labeled(_labeled(5, 5), 0.5, np.random.default_rng(1))
    assert (len(train), len(test)) == (6, 4)


def test_split_is_deterministic_per_seed():
    a = split_labeled(_labeled(10, 10), 0.7, np.random.default_rng(9))
    b = split_labeled(_labeled(10, 10), 0.7, np.random.default_rng(9))
    assert a[0].ids == b[0].ids


def test_split_needs_both_classes():
    with pytest.raises(TrainingError, match="class 0"):
        split_labeled(_labeled(4, 0), 0.7, np.random.default_rng(0))


def test_sample_fraction_half():
    subset = sample_label_fraction(_labeled(30, 70), 0.5, np.random.default_rng(0))
    assert len(subset) == 50 and sum(subset.labels) == 15


def test_sample_fraction_keeps_one_per_class():
    subset = sample_label_fraction(_labeled(7, 13), 0.10, np.random.default_rng(0))
    assert sum(subset.labels) == 1 and len(subset) == 2


def test_full_fraction_is_identity():
    manifest = _labeled(3, 4)
    assert sample_label_fraction(manifest, 1.0, np.random.default_rng(0)).ids == manifest.ids


@pytest.mark.parametrize("fraction", [0.0, -0.1, 1.5])
def test_sample_fraction_range(fraction):
    with pytest.raises(TrainingError):
        sample_label_fraction(_labeled(3, 3), fraction, np.random.default_rng(0))


# ----------------------------
# Pre-training
# ----------------------------
def test_pretrain_records_one_finite_loss_per_epoch(tmp_path):
    unlabeled = _write_volumes(tmp_path, [None] * 4)
    mae = build_mae(TINY, torch.Generator().manual_seed(0))
    _, history = pretrain(mae, unlabeled, TINY_POLICY, _fast(epochs=3))
    assert len(history) == 3 and all(np.isfinite(history))


def test_pretrain_is_deterministic(tmp_path):
    unlabeled = _write_volumes(tmp_path, [None] * 4)
    states = []
    for _ in range(2):
        mae = build_mae(TINY, torch.Generator().manual_seed(0))
        pretrain(mae, unlabeled, TINY_POLICY, _fast(masked_loss_only=True))
        states.append(mae.state_dict())
    for key in states[0]:
        assert torch.equal(states[0][key], states[1][key])


def test_pretrain_refuses_labels(tmp_path):
    labeled = _write_volumes(tmp_path, [1, 0])
    mae = build_mae(TINY, torch.Generator().manual_seed(0))
    with pytest.raises(TrainingError, match="unlabeled"):
        pretrain(mae, labeled, TINY_POLICY, _fast())


def test_pretrain_rejects_volume_of_wrong_dims(tmp_path):
    save_volume(Volume(np.zeros((4, 4, 4), dtype=np.float32), (1, 1, 1)), tmp_path / "odd")
    manifest = DatasetManifest((ManifestRecord("odd", tmp_path / "odd"),), ManifestRole.UNLABELED)
    with pytest.raises(TrainingError, match="dims"):
        pretrain(build_mae(TINY, torch.Generator().manual_seed(0)), manifest, TINY_POLICY, _fast())


def test_non_finite_loss_stops_training(tmp_path, monkeypatch):
    unlabeled = _write_volumes(tmp_path, [None] * 2)
    monkeypatch.setattr(trainer.ops, "mse_loss", lambda *a, **k: torch.tensor(float("nan"), requires_grad=True))
    with pytest.raises(NonFiniteLossError):
        pretrain(build_mae(TINY, torch.Generator().manual_seed(0)), unlabeled, TINY_POLICY, _fast())


# ----------------------------
# Downstream
# ----------------------------
def test_probe_leaves_encoder_bit_identical(tmp_path):
    labeled = _write_volumes(tmp_path, [1, 0, 1, 0])
    mae = build_mae(TINY, torch.Generator().manual_seed(0))
    clf = build_classifier(mae, "probe", torch.Generator().manual_seed(1))
    before = {k: v.clone() for k, v in clf.encoder.state_dict().items()}
    head_before = clf.head_weight.detach().clone()
    train_downstream(clf, labeled, _fast(epochs=3))
    for key, value in clf.encoder.state_dict().items():
        assert torch.equal(value, before[key]), key
    assert not torch.equal(clf.head_weight, head_before)


def test_finetune_changes_encoder(tmp_path):
    labeled = _write_volumes(tmp_path, [1, 0, 1, 0])
    mae = build_mae(TINY, torch.Generator().manual_seed(0))
    clf = build_classifier(mae, "finetune", torch.Generator().manual_seed(1))
    before = clf.encoder.stages[0][0].weight.detach().clone()
    train_downstream(clf, labeled, _fast(epochs=2))
    assert not torch.equal(clf.encoder.stages[0][0].weight, before)


def test_single_positive_case_loss_falls_each_early_epoch(tmp_path):
    labeled = DatasetManifest(_write_volumes(tmp_path, [1]).records, ManifestRole.LABELED)
    mae = build_mae(TINY, torch.Generator().manual_seed(0))
    clf = build_classifier(mae, "probe", torch.Generator().manual_seed(1))
    _, history = train_downstream(clf, labeled, _fast(epochs=6, batch_size=1, lr=1e-2))
    assert all(later < earlier for earlier, later in zip(history, history[1:]))


def test_downstream_refuses_unlabeled_records(tmp_path):
    unlabeled = _write_volumes(tmp_path, [None])
    clf = build_classifier(None, "random", torch.Generator().manual_seed(0), config=TINY)
    with pytest.raises(TrainingError, match="no label"):
        train_downstream(clf, unlabeled, _fast())


def test_head_lr_applies_to_the_head_only():
    clf = build_classifier(build_mae(TINY, torch.Generator().manual_seed(0)), "finetune", torch.Generator().manual_seed(1))
    opt = build_optimizer(clf, _fast(lr=1e-4, head_lr=1e-2))
    body, head = opt.param_groups
    assert (body["lr"], head["lr"]) == (1e-4, 1e-2)
    assert [p is q for p, q in zip(head["params"], clf.head_parameters())] == [True, True]
    assert len(body["params"]) == len(list(clf.encoder.parameters()))


def test_probe_optimizer_holds_only_the_head():
    clf = build_classifier(build_mae(TINY, torch.Generator().manual_seed(0)), "probe", torch.Generator().manual_seed(1))
    (group,) = build_optimizer(clf, _fast(head_lr=1e-2)).param_groups
    assert group["lr"] == 1e-2 and len(group["params"]) == 2


# ----------------------------
# Checkpoints
# ----------------------------
def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    mae = build_mae(TINY, torch.Generator().manual_seed(4))
    with torch.no_grad():
        mae(torch.rand(2, 1, 4, 8, 8))  # moves running stats off their defaults
    header, blob = save_checkpoint(mae, tmp_path / "mae", metadata={"epoch": 3})
    assert (header.name, blob.name) == ("mae.ckpt.json", "mae.ckpt.raw")
    loaded = load_checkpoint(tmp_path / "mae")
    for key, value in mae.state_dict().items():
        assert torch.equal(loaded.state_dict()[key], value), key
    assert loaded.metadata == {"epoch": 3}


def test_checkpoint_bytes_are_deterministic(tmp_path):
    for name in ("a", "b"):
        save_checkpoint(build_mae(TINY, torch.Generator().manual_seed(4)), tmp_path / name, metadata={"seed": 4})
    assert (tmp_path / "a.ckpt.raw").read_bytes() == (tmp_path / "b.ckpt.raw").read_bytes()
    assert (tmp_path / "a.ckpt.json").read_bytes() == (tmp_path / "b.ckpt.json").read_bytes()


def test_classifier_checkpoint_keeps_mode(tmp_path):
    clf = build_classifier(build_mae(TINY, torch.Generator().manual_seed(0)), "probe", torch.Generator().manual_seed(1))
    save_checkpoint(clf, tmp_path / "clf")
    loaded = load_checkpoint(tmp_path / "clf")
    assert loaded.mode == clf.mode
    assert torch.equal(loaded.head_weight, clf.head_weight)
    assert not any(p.requires_grad for p in loaded.encoder.parameters())


def test_truncated_blob_is_rejected(tmp_path):
    _, blob = save_checkpoint(build_mae(TINY, torch.Generator().manual_seed(0)), tmp_path / "mae")
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="length mismatch"):
        load_checkpoint(tmp_path / "mae")


def test_version_mismatch_is_rejected(tmp_path):
    header, _ = save_checkpoint(build_mae(TINY, torch.Generator().manual_seed(0)), tmp_path / "mae")
    header.write_text(header.read_text().replace('"version": 1', '"version": 99'))
    with pytest.raises(CheckpointError, match="version"):
        read_checkpoint(tmp_path / "mae")


def test_checkpoint_paths_accept_either_file():
    assert checkpoint_paths("run/mae.ckpt.raw") == checkpoint_paths("run/mae")


def test_optimizer_state_round_trip(tmp_path):
    mae = build_mae(TINY, torch.Generator().manual_seed(0))
    opt = trainer.ops.make_adam(mae.parameters())
    loss = trainer.ops.mse_loss(mae(torch.rand(2, 1, 4, 8, 8)), torch.rand(2, 1, 4, 8, 8))
    trainer.ops.backward(loss)
    trainer.ops.adam_step(opt)
    save_checkpoint(mae, tmp_path / "mae", optimizer=opt)

    fresh = trainer.ops.make_adam(mae.parameters())
    restore_optimizer(tmp_path / "mae", mae, fresh)
    assert trainer.ops.adam_steps_taken(fresh) == 1
    weight = mae.encoder.stages[0][0].weight
    assert torch.equal(fresh.state[weight]["exp_avg"], opt.state[weight]["exp_avg"])


# ----------------------------
# Resuming
# ----------------------------
def test_resumed_pretraining_matches_an_uninterrupted_run(tmp_path):
    unlabeled = _write_volumes(tmp_path, [None] * 4)
    straight = build_mae(TINY, torch.Generator().manual_seed(0))
    _, full_history = pretrain(straight, unlabeled, TINY_POLICY, _fast(epochs=3))

    first = build_mae(TINY, torch.Generator().manual_seed(0))
    opt = build_optimizer(first, _fast())
    _, history = pretrain(first, unlabeled, TINY_POLICY, _fast(epochs=1), optimizer=opt)
    save_checkpoint(first, tmp_path / "mae", metadata={"loss_history": history}, optimizer=opt)

    resumed = load_checkpoint(tmp_path / "mae")
    opt = build_optimizer(resumed, _fast())
    restore_optimizer(tmp_path / "mae", resumed, opt)
    _, history = pretrain(resumed, unlabeled, TINY_POLICY, _fast(epochs=3), optimizer=opt,
                          history=resumed.metadata["loss_history"])

    assert history == full_history
    for key, value in straight.state_dict().items():
        assert torch.equal(value, resumed.state_dict()[key]), key


def test_finished_history_trains_no_further(tmp_path):
    labeled = _write_volumes(tmp_path, [1, 0])
    clf = build_classifier(None, "random", torch.Generator().manual_seed(0), config=TINY)
    before = {k: v.clone() for k, v in clf.state_dict().items()}
    _, history = train_downstream(clf, labeled, _fast(epochs=2), history=[0.7, 0.6])
    assert history == [0.7, 0.6]
    for key, value in clf.state_dict().items():
        assert torch.equal(value, before[key])


def test_restore_optimizer_needs_saved_state(tmp_path):
    mae = build_mae(TINY, torch.Generator().manual_seed(0))
    save_checkpoint(mae, tmp_path / "mae")
    with pytest.raises(CheckpointError, match="no optimizer state"):
        restore_optimizer(tmp_path / "mae", mae, build_optimizer(mae, _fast()))


def test_restore_optimizer_rejects_state_for_frozen_parameters(tmp_path):
    mae = build_mae(TINY, torch.Generator().manual_seed(0))
    clf = build_classifier(mae, "finetune", torch.Generator().manual_seed(1))
    opt = build_optimizer(clf, _fast())
    clf(torch.rand(2, 1, 4, 8, 8)).sum().backward()
    trainer.ops.adam_step(opt)
    save_checkpoint(clf, tmp_path / "clf", optimizer=opt)

    probe = build_classifier(mae, "probe", torch.Generator().manual_seed(1))
    probe.load_state_dict(clf.state_dict())
    with pytest.raises(CheckpointError, match="no matching trainable parameter"):
        restore_optimizer(tmp_path / "clf", probe, build_optimizer(probe, _fast()))


# ----------------------------
# Default scale
# ----------------------------
@pytest.mark.slow
def test_default_pretraining_halves_the_reconstruction_loss(tmp_path):
    unlabeled, _ = generate_dataset(PhantomConfig(), 64, 2, 0.5, np.random.default_rng(0), tmp_path, progress=False)
    mae = build_mae(ModelConfig(), torch.Generator().manual_seed(0))
    _, history = pretrain(mae, unlabeled, MaskPolicy.dynamic(), TrainConfig(progress=False))
    assert len(history) == 50 and all(np.isfinite(history))
    assert history[-1] <= 0.5 * history[0]
