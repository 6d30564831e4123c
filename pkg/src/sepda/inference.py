"""Ensemble prediction with the shared head plus one domain-specific head."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .networks import ModelBundle, as_tensor


@dataclass(frozen=True)
class Prediction:
    """Batch of predictions; arrays have one row per example."""

    shared: np.ndarray
    branch: np.ndarray
    ensemble: np.ndarray

    @property
    def hard_label(self) -> np.ndarray:
        # ties go to the negative class
        return (self.ensemble[:, 1] > self.ensemble[:, 0]).astype(np.int64)

    @property
    def positive_score(self) -> np.ndarray:
        return self.ensemble[:, 1]

    def __len__(self) -> int:
        return self.ensemble.shape[0]

    def __getitem__(self, i: int) -> "Prediction":
        i = range(len(self))[i]
        sl = slice(i, i + 1)
        return Prediction(self.shared[sl], self.branch[sl], self.ensemble[sl])


def ensemble(shared, branch) -> Prediction:
    shared = np.atleast_2d(np.asarray(shared, dtype=np.float64))
    branch = np.atleast_2d(np.asarray(branch, dtype=np.float64))
    if shared.shape != branch.shape:
        raise ValueError("shared and branch predictions differ in shape")
    return Prediction(shared, branch, (shared + branch) / 2.0)


def _rowwise(fn, x: torch.Tensor) -> torch.Tensor:
    # one row at a time: BLAS picks different kernels for different batch
    # sizes, and batch results must equal single-example results bit for bit
    return torch.cat([fn(x[i : i + 1]) for i in range(x.shape[0])], dim=0)


def _predict(bundle: ModelBundle, x, head_name: str) -> Prediction:
    x = as_tensor(np.atleast_2d(x) if not isinstance(x, torch.Tensor) else x)
    if x.dim() == 1:
        x = x.unsqueeze(0)
    with torch.no_grad():
        if x.shape[0] == 0:
            bundle.extractor(x)  # shape check
            empty = np.zeros((0, 2))
            return Prediction(empty, empty, empty)
        f = _rowwise(bundle.extractor, x)
        shared = _rowwise(bundle.c_d, f).numpy()
        if bundle.arch.single_head:
            return Prediction(shared, shared, shared.copy())
        branch = _rowwise(getattr(bundle, head_name), f).numpy()
    return ensemble(shared, branch)


def predict_target(bundle: ModelBundle, x) -> Prediction:
    """Average of the shared and target-specific heads (the source head is never run)."""
    return _predict(bundle, x, "c_t")


def predict_source(bundle: ModelBundle, x) -> Prediction:
    return _predict(bundle, x, "c_s")


def discriminator_accuracy(bundle: ModelBundle, source_x, target_x) -> float:
    """Balanced accuracy of D1 at threshold 0.5 on held-out domain labels."""
    with torch.no_grad():
        ds = bundle.d1(bundle.extractor(as_tensor(source_x))).numpy()
        dt = bundle.d1(bundle.extractor(as_tensor(target_x))).numpy()
    return float(0.5 * (np.mean(ds < 0.5) + np.mean(dt > 0.5)))


def export_predictions(path, ids: Sequence[str], pred: Prediction) -> None:
    """Newline-delimited records of (id, positive_score, hard_label)."""
    if len(ids) != len(pred):
        raise ValueError("ids and predictions differ in length")
    with Path(path).open("w", encoding="utf-8") as fh:
        for i, score, label in zip(ids, pred.positive_score, pred.hard_label):
            fh.write(json.dumps({"id": i, "positive_score": float(score), "hard_label": int(label)}) + "\n")
