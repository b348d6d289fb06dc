"""Confusion matrices, class-mean accuracy and latent export."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch


@dataclass
class ConfusionMatrix:
    """``values[i, j]`` = fraction of true-class-j samples predicted as class i.

    Columns of classes absent from the test set are all zero and listed in
    ``undefined``.
    """

    values: np.ndarray
    counts: np.ndarray  # raw tallies, same layout
    class_names: list

    @property
    def num_classes(self) -> int:
        return self.values.shape[0]

    @property
    def support(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def undefined(self) -> list[int]:
        return [int(j) for j in np.flatnonzero(self.support == 0)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["predicted\\true"] + list(self.class_names))
            for name, row in zip(self.class_names, self.values):
                w.writerow([name] + [repr(float(x)) for x in row])

    def summary(self) -> dict:
        return {
            "average_accuracy": average_accuracy(self),
            "num_classes": self.num_classes,
            "class_names": list(self.class_names),
            "per_class_counts": [int(x) for x in self.support],
            "per_class_accuracy": [float(self.values[j, j]) for j in range(self.num_classes)],
            "undefined_classes": self.undefined,
        }


def confusion_from_predictions(predicted: Sequence[int], true: Sequence[int], num_classes: int, class_names=None) -> ConfusionMatrix:
    predicted = np.asarray(predicted, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if predicted.shape != true.shape:
        raise ValueError("prediction and label arrays differ in length")
    if np.any(true < 0) or np.any(true >= num_classes) or np.any(predicted < 0) or np.any(predicted >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (predicted, true), 1)
    support = counts.sum(axis=0)
    values = np.divide(counts, support, out=np.zeros(counts.shape), where=support > 0)
    names = list(class_names) if class_names is not None else [str(i) for i in range(num_classes)]
    return ConfusionMatrix(values, counts, names)


def argmax_lowest(scores: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest index."""
    return np.argmax(scores, axis=-1)


@torch.no_grad()
def predict_logits(model, csi: np.ndarray, bsnr: np.ndarray, batch_size: int = 256) -> np.ndarray:
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for s in range(0, csi.shape[0], batch_size):
        c = torch.as_tensor(csi[s:s + batch_size], dtype=dtype)
        b = torch.as_tensor(bsnr[s:s + batch_size], dtype=dtype)
        out.append(model(c, b).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, model.arch.dims.num_classes))


def confusion_matrix(model, data, class_names=None) -> ConfusionMatrix:
    """Evaluate ``model`` on prepared data (see ``train.SensingData``); all samples must be labeled."""
    if np.any(data.labels < 0):
        raise ValueError("confusion matrix needs a fully labeled test set")
    n_cls = model.arch.dims.num_classes
    if data.num_classes and data.num_classes != n_cls:
        raise ValueError(f"test set has {data.num_classes} classes but the model predicts {n_cls}")
    logits = predict_logits(model, data.csi, data.bsnr_standardized())
    return confusion_from_predictions(argmax_lowest(logits), data.labels, n_cls, class_names)


def average_accuracy(cm: ConfusionMatrix) -> float:
    """Unweighted mean of the diagonal over classes present in the test set."""
    undefined = cm.undefined
    if undefined:
        warnings.warn(f"classes {undefined} have no test samples; excluded from the average", RuntimeWarning, stacklevel=2)
    defined = [j for j in range(cm.num_classes) if j not in undefined]
    if not defined:
        return float("nan")
    return float(np.mean([cm.values[j, j] for j in defined]))


@torch.no_grad()
def export_latents(model, data, path=None, batch_size: int = 256) -> np.ndarray:
    """Fused latent per sample plus its label (-1 if unlabeled); optionally written as CSV."""
    model.eval()
    dtype = next(model.parameters()).dtype
    bsnr = data.bsnr_standardized()
    rows = []
    for s in range(0, data.csi.shape[0], batch_size):
        f = model.latent(torch.as_tensor(data.csi[s:s + batch_size], dtype=dtype), torch.as_tensor(bsnr[s:s + batch_size], dtype=dtype))
        rows.append(f.double().numpy())
    latents = np.concatenate(rows) if rows else np.zeros((0, model.arch.dims.latent_dim))
    table = np.concatenate([latents, data.labels[:, None].astype(float)], axis=1)
    if path is not None:
        d = latents.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"f{k}" for k in range(d)] + ["label"])
            for row, label in zip(latents, data.labels):
                w.writerow([repr(float(x)) for x in row] + [int(label)])
    return table


def write_metrics(cm: ConfusionMatrix, directory, extra: Optional[dict] = None) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    cm.to_csv(out / "confusion.csv")
    summary = cm.summary()
    if extra:
        summary.update(extra)
    (out / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return out
