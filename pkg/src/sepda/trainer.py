"""Training loop, baselines and checkpoints."""

from __future__ import annotations

import json
import math
import time
import zipfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np
import torch

from .datasets import (DomainDataset, batches_per_epoch, make_batches, make_single_batches,
                       stack_features)
from .losses import LossConfig, LossReport, composite_objective, cross_entropy, focal_loss, one_hot
from .metrics import MetricsError, evaluate
from .networks import ArchSpec, ModelBundle, ShapeError, as_tensor, build_bundle

CHECKPOINT_VERSION = 1
BASELINES = ("source_only", "target_only", "fine_tune", "feature_da_only")
METHODS = ("covid_da",) + BASELINES


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 0.001
    batch_size: int = 16
    optimizer: str = "sgd"
    momentum: float = 0.0
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        loss = d.pop("loss", {}) or {}
        return cls(**d, loss=loss if isinstance(loss, LossConfig) else LossConfig(**loss))


@dataclass
class TrainLog:
    steps: list[LossReport] = field(default_factory=list)
    epoch_metrics: list[dict] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    # (phase name, first step index)
    phases: list[tuple[str, int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "steps": [r.as_record() for r in self.steps],
            "epoch_metrics": self.epoch_metrics,
            "epoch_seconds": self.epoch_seconds,
            "phases": [list(p) for p in self.phases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainLog":
        steps = [LossReport(focal=r["L_f"], d1=r["L_d1"], d2=r["L_d2"], div=r["L_div"],
                            total=r["J"], step=r["step"]) for r in d.get("steps", [])]
        return cls(steps=steps, epoch_metrics=list(d.get("epoch_metrics", [])),
                   epoch_seconds=list(d.get("epoch_seconds", [])),
                   phases=[tuple(p) for p in d.get("phases", [])])

    def write_jsonl(self, path) -> None:
        """One record per optimizer step: step, L_f, L_d1, L_d2, L_div, J."""
        with Path(path).open("w", encoding="utf-8") as fh:
            for rep in self.steps:
                fh.write(json.dumps(rep.as_record()) + "\n")


def _optimizer(params: list, cfg: TrainConfig) -> torch.optim.SGD:
    momentum = cfg.momentum if cfg.optimizer == "sgd_momentum" else 0.0
    return torch.optim.SGD(params, lr=cfg.lr, momentum=momentum)


def _param_names(bundle: ModelBundle) -> dict[int, str]:
    return {id(p): name for name, p in bundle.named_parameters()}


def _save_momentum(bundle: ModelBundle, opt: torch.optim.Optimizer) -> None:
    names = _param_names(bundle)
    buffers = {}
    for group in opt.param_groups:
        for p in group["params"]:
            buf = opt.state.get(p, {}).get("momentum_buffer")
            if buf is not None:
                buffers[names[id(p)]] = buf.detach().clone()
    bundle.state.extra["momentum"] = buffers


def _load_momentum(bundle: ModelBundle, opt: torch.optim.Optimizer) -> None:
    buffers = bundle.state.extra.get("momentum", {})
    if not buffers:
        return
    names = _param_names(bundle)
    for group in opt.param_groups:
        for p in group["params"]:
            buf = buffers.get(names[id(p)])
            if buf is not None:
                opt.state[p]["momentum_buffer"] = buf.clone()


def _epoch_metrics(bundle: ModelBundle, ds: DomainDataset) -> Optional[dict]:
    try:
        return evaluate(bundle, ds.target_test).to_record()
    except MetricsError:
        return None


def _check_finite(rep: LossReport, step: int) -> None:
    if not rep.is_finite():
        raise TrainingError(
            f"non-finite loss at step {step}: L_f={rep.focal} L_d1={rep.d1} "
            f"L_d2={rep.d2} L_div={rep.div} J={rep.total}"
        )


def _check_dims(ds: DomainDataset, bundle: ModelBundle) -> None:
    if bundle.arch.input_dim != ds.dim:
        raise ShapeError(f"bundle expects {bundle.arch.input_dim}-dim inputs, dataset has {ds.dim}")


def batch_seed(seed: int) -> int:
    # batch order and parameter init draw from separate streams of the same seed
    return int(np.random.SeedSequence([int(seed), 1]).generate_state(1)[0])


def train(ds: DomainDataset, bundle: ModelBundle, cfg: TrainConfig, log: Optional[TrainLog] = None,
          evaluate_epochs: bool = True,
          on_step: Optional[Callable[[int, LossReport], None]] = None) -> tuple[ModelBundle, TrainLog]:
    """Run ``cfg.epochs`` epochs of joint descent on the composite objective.

    Passing the log of an interrupted run resumes it: the batch stream is
    regenerated from the seed and the already-taken steps are skipped.
    """
    _check_dims(ds, bundle)
    log = log if log is not None else TrainLog()
    if not log.phases:
        log.phases.append(("joint", 0))
    steps_per_epoch = batches_per_epoch(ds, cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    done = len(log.steps)
    if done > total:
        raise TrainingError(f"log already holds {done} steps, more than the {total} requested")

    opt = _optimizer(bundle.theta1() + bundle.theta2(), cfg)
    _load_momentum(bundle, opt)
    bundle.train()
    stream = make_batches(ds, cfg.batch_size, batch_seed(cfg.seed), epochs=cfg.epochs)
    t0 = time.perf_counter()
    for step, batch in enumerate(stream):
        if step < done:
            continue
        opt.zero_grad(set_to_none=True)
        loss, rep = composite_objective(batch, bundle, cfg.loss)
        rep = replace(rep, step=step)
        _check_finite(rep, step)
        loss.backward()
        opt.step()
        log.steps.append(rep)
        bundle.state.step = step + 1
        if on_step is not None:
            on_step(step, rep)
        if (step + 1) % steps_per_epoch == 0:
            log.epoch_seconds.append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            if evaluate_epochs:
                log.epoch_metrics.append(_epoch_metrics(bundle, ds))
    _save_momentum(bundle, opt)
    bundle.eval()
    return bundle, log


def _supervised(bundle: ModelBundle, batches: Iterable, steps_per_epoch: int, cfg: TrainConfig,
                log: TrainLog, ds: Optional[DomainDataset], evaluate_epochs: bool) -> None:
    params = bundle.group("extractor") + bundle.group("c_d")
    opt = _optimizer(params, cfg)
    bundle.train()
    start = len(log.steps)
    t0 = time.perf_counter()
    for i, (x, y) in enumerate(batches):
        step = start + i
        opt.zero_grad(set_to_none=True)
        y_hat = bundle.c_d(bundle.extractor(as_tensor(x)))
        if cfg.loss.classification == "focal":
            loss = focal_loss(one_hot(y), y_hat, cfg.loss.gamma, cfg.loss.eps)
        else:
            loss = cross_entropy(one_hot(y), y_hat, cfg.loss.eps)
        value = float(loss.detach())
        rep = LossReport(focal=value, d1=0.0, d2=0.0, div=0.0, total=value, step=step)
        _check_finite(rep, step)
        loss.backward()
        opt.step()
        log.steps.append(rep)
        bundle.state.step = step + 1
        if (i + 1) % steps_per_epoch == 0:
            log.epoch_seconds.append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            if evaluate_epochs and ds is not None:
                log.epoch_metrics.append(_epoch_metrics(bundle, ds))
    bundle.eval()


def default_arch(ds: DomainDataset, **overrides) -> ArchSpec:
    return ArchSpec(input_dim=ds.dim, **overrides)


def run_baseline(kind: str, ds: DomainDataset, cfg: TrainConfig, arch: Optional[ArchSpec] = None,
                 evaluate_epochs: bool = True) -> tuple[ModelBundle, TrainLog]:
    """Train one of the reference baselines from a fresh seeded bundle.

    ``source_only``, ``target_only`` and ``fine_tune`` train G_f and C_d with the
    classification loss and predict with C_d alone. ``feature_da_only`` keeps
    the two-head ensembles and adds only the feature-level domain loss.
    """
    if kind not in BASELINES:
        raise ValueError(f"unknown baseline {kind!r}")
    arch = arch or default_arch(ds)
    if kind == "feature_da_only":
        bundle = build_bundle(replace(arch, single_head=False), cfg.seed)
        loss = replace(cfg.loss, use_d1=True, use_d2=False, use_div=False)
        return train(ds, bundle, replace(cfg, loss=loss), evaluate_epochs=evaluate_epochs)

    bundle = build_bundle(replace(arch, single_head=True), cfg.seed)
    _check_dims(ds, bundle)
    log = TrainLog()
    b, bs = cfg.batch_size, batch_seed(cfg.seed)
    if kind in ("source_only", "fine_tune"):
        log.phases.append(("source", len(log.steps)))
        steps = math.ceil(ds.n_source / b)
        _supervised(bundle, make_single_batches(ds.source_train, b, bs, cfg.epochs), steps, cfg,
                    log, ds, evaluate_epochs)
    if kind in ("target_only", "fine_tune"):
        log.phases.append(("target", len(log.steps)))
        steps = math.ceil(ds.n_target_labeled / b)
        _supervised(bundle, make_single_batches(ds.target_train_labeled, b, bs + 1, cfg.epochs),
                    steps, cfg, log, ds, evaluate_epochs)
    return bundle, log


def run_method(method: str, ds: DomainDataset, cfg: TrainConfig, arch: Optional[ArchSpec] = None,
               evaluate_epochs: bool = True) -> tuple[ModelBundle, TrainLog]:
    if method == "covid_da":
        bundle = build_bundle(arch or default_arch(ds), cfg.seed)
        return train(ds, bundle, cfg, evaluate_epochs=evaluate_epochs)
    return run_baseline(method, ds, cfg, arch, evaluate_epochs=evaluate_epochs)


# ---------------------------------------------------------------------------
# checkpoints: a zip of .npy arrays plus a JSON header (np.savez layout)


def save_checkpoint(bundle: ModelBundle, log: Optional[TrainLog], path) -> None:
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "arch": bundle.arch.to_dict(),
        "seed": bundle.state.seed,
        "step": bundle.state.step,
        # wall-clock timings stay out so identical runs give identical files
        "log": {**(log or TrainLog()).to_dict(), "epoch_seconds": []},
    }
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in bundle.state_dict().items()}
    for k, v in bundle.state.extra.get("momentum", {}).items():
        arrays[f"momentum/{k}"] = v.cpu().numpy()
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    _write_npz(Path(path), arrays)


def _write_npz(path: Path, arrays: dict) -> None:
    # np.savez stamps entries with the wall clock; a fixed date keeps files bit-reproducible
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asanyarray(arrays[name]), allow_pickle=False)


def load_checkpoint(path, bundle: Optional[ModelBundle] = None) -> tuple[ModelBundle, TrainLog]:
    """Restore a bundle (new, or ``bundle`` in place) and its training log."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
        meta = json.loads(str(arrays.pop("meta")))
    except (OSError, ValueError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {meta.get('format_version')} != {CHECKPOINT_VERSION}")
    arch = ArchSpec.from_dict(meta["arch"])
    if bundle is None:
        bundle = ModelBundle(arch)
    elif bundle.arch.to_dict() != arch.to_dict():
        raise CheckpointError(f"architecture mismatch: checkpoint {arch}, bundle {bundle.arch}")
    state = {k[len("param/"):]: torch.from_numpy(v.copy()) for k, v in arrays.items()
             if k.startswith("param/")}
    try:
        bundle.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"parameter mismatch: {exc}") from exc
    bundle.state.seed = int(meta["seed"])
    bundle.state.step = int(meta["step"])
    bundle.state.extra["momentum"] = {k[len("momentum/"):]: torch.from_numpy(v.copy())
                                      for k, v in arrays.items() if k.startswith("momentum/")}
    bundle.eval()
    return bundle, TrainLog.from_dict(meta["log"])


def domain_confusion(bundle: ModelBundle, ds: DomainDataset) -> float:
    """Held-out D1 balanced accuracy (source_test vs. target_test)."""
    from .inference import discriminator_accuracy

    if not ds.source_test or not ds.target_test:
        raise ValueError("domain confusion needs held-out source and target examples")
    return discriminator_accuracy(bundle, stack_features(ds.source_test), stack_features(ds.target_test))

