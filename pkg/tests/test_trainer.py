import json
import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from sepda import trainer
from sepda.datasets import DomainDataset, SyntheticConfig, generate_synthetic
from sepda.losses import LossConfig
from sepda.networks import ArchSpec, ShapeError, build_bundle
from sepda.trainer import CheckpointError, TrainConfig, TrainingError, TrainLog


def tiny_ds(seed=0, **kw):
    base = dict(n_source=32, n_target=32, n_test=20, n_source_test=10, labeled_fraction=0.25, seed=seed)
    base.update(kw)
    return generate_synthetic(SyntheticConfig(**base))


def tiny_arch(ds):
    return ArchSpec(input_dim=ds.dim, hidden=(8,), disc_hidden=6)


def same(a, b, keys=None):
    keys = keys or a.keys()
    return all(torch.equal(a[k], b[k]) for k in keys)


def keys_of(snapshot, prefix):
    return [k for k in snapshot if k.startswith(prefix + ".")]


def test_one_epoch_two_batches_gives_two_reports():
    ds = tiny_ds()
    bundle = build_bundle(tiny_arch(ds), seed=0)
    _, log = trainer.train(ds, bundle, TrainConfig(epochs=1, batch_size=16))
    assert len(log.steps) == 2
    assert [r.step for r in log.steps] == [0, 1]
    assert len(log.epoch_metrics) == 1 and len(log.epoch_seconds) == 1
    assert bundle.state.step == 2


def test_training_is_deterministic():
    ds = tiny_ds()
    cfg = TrainConfig(epochs=2, batch_size=8, optimizer="sgd_momentum", momentum=0.9, seed=4)
    a, la = trainer.run_method("covid_da", ds, cfg, tiny_arch(ds))
    b, lb = trainer.run_method("covid_da", ds, cfg, tiny_arch(ds))
    assert same(a.snapshot(), b.snapshot())
    assert [r.as_record() for r in la.steps] == [r.as_record() for r in lb.steps]


def test_different_seeds_differ():
    ds = tiny_ds()
    a, _ = trainer.run_method("covid_da", ds, TrainConfig(epochs=1, seed=0), tiny_arch(ds))
    b, _ = trainer.run_method("covid_da", ds, TrainConfig(epochs=1, seed=1), tiny_arch(ds))
    assert not same(a.snapshot(), b.snapshot())


def test_classification_only_leaves_discriminators_untouched():
    ds = tiny_ds()
    bundle = build_bundle(tiny_arch(ds), seed=1)
    before = bundle.snapshot()
    cfg = TrainConfig(epochs=1, lr=0.05, loss=LossConfig(alpha=0.0, beta=0.0))
    trainer.train(ds, bundle, cfg)
    after = bundle.snapshot()
    for group in ("d1", "d2"):
        assert same(before, after, keys_of(before, group))
    for group in ("extractor", "c_d", "c_t", "c_s"):
        assert not same(before, after, keys_of(before, group))


def test_diversity_only_never_moves_discriminators():
    ds = tiny_ds()
    bundle = build_bundle(tiny_arch(ds), seed=1)
    before = bundle.snapshot()
    cfg = TrainConfig(epochs=1, lr=0.05, loss=LossConfig(use_d1=False, use_d2=False))
    _, log = trainer.train(ds, bundle, cfg)
    after = bundle.snapshot()
    assert same(before, after, keys_of(before, "d1") + keys_of(before, "d2"))
    # disabled terms are still reported
    assert all(math.isfinite(r.d1) and math.isfinite(r.d2) for r in log.steps)


def test_d1_only_moves_d1_but_not_d2():
    ds = tiny_ds()
    bundle = build_bundle(tiny_arch(ds), seed=2)
    before = bundle.snapshot()
    cfg = TrainConfig(epochs=1, lr=0.05, loss=LossConfig(use_d2=False, use_div=False))
    trainer.train(ds, bundle, cfg)
    after = bundle.snapshot()
    assert same(before, after, keys_of(before, "d2"))
    assert not same(before, after, keys_of(before, "d1"))


@pytest.mark.parametrize("kind", ["source_only", "target_only", "fine_tune"])
def test_supervised_baselines_touch_only_extractor_and_shared_head(kind):
    ds = tiny_ds()
    arch = tiny_arch(ds)
    fresh = build_bundle(replace(arch, single_head=True), seed=0).snapshot()
    bundle, _ = trainer.run_baseline(kind, ds, TrainConfig(epochs=1, lr=0.05), arch)
    after = bundle.snapshot()
    moved = {k.split(".")[0] for k in fresh if not torch.equal(fresh[k], after[k])}
    assert moved == {"extractor", "c_d"}


def test_fine_tune_phase_boundary():
    ds = tiny_ds()
    _, log = trainer.run_baseline("fine_tune", ds, TrainConfig(epochs=2, batch_size=8), tiny_arch(ds))
    src_steps = 2 * math.ceil(ds.n_source / 8)
    tgt_steps = 2 * math.ceil(ds.n_target_labeled / 8)
    assert log.phases == [("source", 0), ("target", src_steps)]
    assert len(log.steps) == src_steps + tgt_steps
    assert [r.step for r in log.steps] == list(range(src_steps + tgt_steps))


def test_feature_da_only_reports_zero_weight_terms():
    ds = tiny_ds()
    bundle, log = trainer.run_baseline("feature_da_only", ds, TrainConfig(epochs=1), tiny_arch(ds))
    fresh = build_bundle(tiny_arch(ds), seed=0).snapshot()
    after = bundle.snapshot()
    assert same(fresh, after, keys_of(fresh, "d2"))
    assert not same(fresh, after, keys_of(fresh, "d1"))
    for r in log.steps:
        assert r.total == pytest.approx(r.focal + 0.1 * r.d1, abs=1e-12)


def test_unknown_method_raises():
    ds = tiny_ds()
    with pytest.raises(ValueError):
        trainer.run_method("bogus", ds, TrainConfig(epochs=1))


def test_supervised_loss_decreases():
    ds = tiny_ds(n_source=200, n_target=80)
    cfg = TrainConfig(epochs=20, lr=0.05, batch_size=16, loss=LossConfig(alpha=0.0, beta=0.0))
    _, log = trainer.run_method("covid_da", ds, cfg, tiny_arch(ds), evaluate_epochs=False)
    per_epoch = len(log.steps) // cfg.epochs
    first = np.mean([r.focal for r in log.steps[:per_epoch]])
    last = np.mean([r.focal for r in log.steps[-per_epoch:]])
    assert last < first


def test_nonfinite_loss_aborts():
    ds = tiny_ds()
    bundle = build_bundle(tiny_arch(ds), seed=0)
    with torch.no_grad():
        bundle.c_d.fc.bias.fill_(float("nan"))
    with pytest.raises(TrainingError, match="non-finite"):
        trainer.train(ds, bundle, TrainConfig(epochs=1))


def test_dataset_dimension_mismatch_raises():
    ds = tiny_ds()
    bundle = build_bundle(ArchSpec(input_dim=3), seed=0)
    with pytest.raises(ShapeError):
        trainer.train(ds, bundle, TrainConfig(epochs=1))


@pytest.mark.parametrize("kw", [dict(epochs=0), dict(lr=0.0), dict(batch_size=0), dict(optimizer="adam")])
def test_invalid_train_config(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_train_config_dict_round_trip():
    cfg = TrainConfig(epochs=3, loss=LossConfig(alpha=0.3, domain_measure="gan"))
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


# --- checkpoints ------------------------------------------------------------


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    ds = tiny_ds()
    cfg = TrainConfig(epochs=1, optimizer="sgd_momentum", momentum=0.9)
    bundle, log = trainer.run_method("covid_da", ds, cfg, tiny_arch(ds))
    path = tmp_path / "ck.npz"
    trainer.save_checkpoint(bundle, log, path)
    back, back_log = trainer.load_checkpoint(path)
    assert same(bundle.snapshot(), back.snapshot())
    assert back.state.step == bundle.state.step
    assert back_log.steps == log.steps and back_log.epoch_metrics == log.epoch_metrics
    assert back_log.epoch_seconds == []
    mom = bundle.state.extra["momentum"]
    assert mom and all(torch.equal(mom[k], back.state.extra["momentum"][k]) for k in mom)


def test_resume_matches_uninterrupted_run(tmp_path):
    ds = tiny_ds()
    arch = tiny_arch(ds)
    full_cfg = TrainConfig(epochs=3, batch_size=8, optimizer="sgd_momentum", momentum=0.9, seed=2)
    full, full_log = trainer.train(ds, build_bundle(arch, 2), full_cfg, evaluate_epochs=False)

    part, part_log = trainer.train(ds, build_bundle(arch, 2), replace(full_cfg, epochs=1),
                                   evaluate_epochs=False)
    trainer.save_checkpoint(part, part_log, tmp_path / "k.npz")
    resumed, resumed_log = trainer.load_checkpoint(tmp_path / "k.npz")
    resumed, resumed_log = trainer.train(ds, resumed, full_cfg, log=resumed_log, evaluate_epochs=False)

    assert same(full.snapshot(), resumed.snapshot())
    assert [r.as_record() for r in full_log.steps] == [r.as_record() for r in resumed_log.steps]


def test_resume_with_longer_log_raises():
    ds = tiny_ds()
    _, log = trainer.train(ds, build_bundle(tiny_arch(ds), 0), TrainConfig(epochs=2), evaluate_epochs=False)
    with pytest.raises(TrainingError):
        trainer.train(ds, build_bundle(tiny_arch(ds), 0), TrainConfig(epochs=1), log=log)


def test_checkpoint_bytes_are_reproducible(tmp_path):
    ds = tiny_ds()
    for name in ("a.npz", "b.npz"):
        bundle, log = trainer.run_method("covid_da", ds, TrainConfig(epochs=1), tiny_arch(ds))
        trainer.save_checkpoint(bundle, log, tmp_path / name)
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()


def test_reloaded_bundle_forward_is_bit_exact(tmp_path):
    from sepda.inference import predict_target

    ds = tiny_ds()
    bundle, log = trainer.run_method("covid_da", ds, TrainConfig(epochs=1), tiny_arch(ds))
    trainer.save_checkpoint(bundle, log, tmp_path / "c.npz")
    back, _ = trainer.load_checkpoint(tmp_path / "c.npz")
    x = np.random.default_rng(0).normal(size=(50, ds.dim))
    assert predict_target(bundle, x).ensemble.tobytes() == predict_target(back, x).ensemble.tobytes()


def test_checkpoint_into_wrong_architecture_raises(tmp_path):
    bundle = build_bundle(ArchSpec(input_dim=2), seed=0)
    trainer.save_checkpoint(bundle, None, tmp_path / "a.npz")
    with pytest.raises(CheckpointError):
        trainer.load_checkpoint(tmp_path / "a.npz", build_bundle(ArchSpec(input_dim=3), seed=0))


def test_checkpoint_with_wrong_shapes_raises(tmp_path):
    bundle = build_bundle(ArchSpec(input_dim=2), seed=0)
    path = tmp_path / "a.npz"
    trainer.save_checkpoint(bundle, None, path)
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    key = next(k for k in arrays if k.startswith("param/extractor"))
    arrays[key] = np.zeros((1, 1))
    np.savez(path, **arrays)
    with pytest.raises(CheckpointError):
        trainer.load_checkpoint(path)


def test_corrupt_checkpoint_raises(tmp_path):
    path = tmp_path / "bad.npz"
    path.write_bytes(b"definitely not a zip archive")
    with pytest.raises(CheckpointError):
        trainer.load_checkpoint(path)
    with pytest.raises(CheckpointError):
        trainer.load_checkpoint(tmp_path / "missing.npz")


def test_checkpoint_version_mismatch_raises(tmp_path):
    bundle = build_bundle(ArchSpec(input_dim=2), seed=0)
    path = tmp_path / "v.npz"
    trainer.save_checkpoint(bundle, None, path)
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    meta = json.loads(str(arrays["meta"]))
    meta["format_version"] = 99
    arrays["meta"] = np.array(json.dumps(meta))
    np.savez(path, **arrays)
    with pytest.raises(CheckpointError, match="version"):
        trainer.load_checkpoint(path)


def test_train_log_jsonl(tmp_path):
    ds = tiny_ds()
    _, log = trainer.train(ds, build_bundle(tiny_arch(ds), 0), TrainConfig(epochs=1), evaluate_epochs=False)
    path = tmp_path / "log.jsonl"
    log.write_jsonl(path)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(rows) == len(log.steps)
    assert set(rows[0]) == {"step", "L_f", "L_d1", "L_d2", "L_div", "J"}
    assert TrainLog.from_dict(log.to_dict()).to_dict() == log.to_dict()


def test_domain_confusion_needs_held_out_pools():
    ds = tiny_ds()
    bundle = build_bundle(tiny_arch(ds), 0)
    acc = trainer.domain_confusion(bundle, ds)
    assert 0.0 <= acc <= 1.0
    no_src = DomainDataset(ds.source_train, ds.target_train_labeled, ds.target_train_unlabeled,
                           ds.target_test)
    with pytest.raises(ValueError):
        trainer.domain_confusion(bundle, no_src)
