"""Supervised training, autoencoder pretraining and freeze/fine-tune transfer."""

from __future__ import annotations

import copy
import csv
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
import torch

from .calib import CalibStats, csi_features, draw_scale, standardize_csi_batch
from .channel import Dataset
from .evaluate import average_accuracy, confusion_from_predictions
from .fusion import FusionModel, build_model
from .nn import AdamState, adam_step, branch_mse, classification_loss, weighted_mse


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr_head: float = 0.01
    lr_fusion_weights: float = 1e-3
    lr_fusion_proj: float = 1e-4
    lr_encoder: float = 0.0
    lr_decoder: float = 1e-3
    lam: float = 0.5
    seed: int = 0
    labeled_fraction: float = 1.0
    early_stop_patience: int = 0
    val_fraction: float = 0.1
    augment_bsnr: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must be in [0, 1]")
        if not 0 < self.labeled_fraction <= 1:
            raise ValueError("labeled_fraction must be in (0, 1]")
        rates = (self.lr_head, self.lr_fusion_weights, self.lr_fusion_proj, self.lr_encoder, self.lr_decoder)
        if any(r < 0 for r in rates):
            raise ValueError("learning rates must be nonnegative")

    @classmethod
    def supervised(cls, **kw) -> "TrainConfig":
        return cls(**{"epochs": 200, "lr_head": 0.01, **kw})

    @classmethod
    def pretraining(cls, **kw) -> "TrainConfig":
        base = {"epochs": 800, "lr_encoder": 1e-3, "lr_fusion_weights": 1e-3, "lr_fusion_proj": 1e-3, "lr_decoder": 1e-3, "lr_head": 0.0}
        return cls(**{**base, **kw})

    @classmethod
    def finetuning(cls, **kw) -> "TrainConfig":
        base = {"epochs": 200, "lr_head": 0.01, "lr_fusion_weights": 1e-3, "lr_fusion_proj": 1e-4, "lr_encoder": 0.0, "lr_decoder": 0.0}
        return cls(**{**base, **kw})

    def group_rates(self) -> dict:
        return {
            "head": self.lr_head,
            "fusion_weights": self.lr_fusion_weights,
            "fusion_proj": self.lr_fusion_proj,
            "encoder": self.lr_encoder,
            "decoder": self.lr_decoder,
        }


@dataclass
class SensingData:
    """Network-ready arrays: standardized CSI channels and raw beam SNRs.

    Beam SNRs stay raw so training can apply the scale augmentation before
    standardizing.
    """

    csi: np.ndarray  # (n, 2*streams, active subcarriers)
    bsnr: np.ndarray  # (n, beams), raw
    bsnr_mean: np.ndarray
    bsnr_std: np.ndarray
    labels: np.ndarray
    num_classes: int = 0

    def __len__(self) -> int:
        return self.labels.shape[0]

    def bsnr_standardized(self, scale: Optional[np.ndarray] = None) -> np.ndarray:
        raw = self.bsnr if scale is None else self.bsnr * scale[:, None]
        return (raw - self.bsnr_mean) / self.bsnr_std

    def subset(self, index) -> "SensingData":
        index = np.asarray(index, dtype=np.int64)
        return replace(self, csi=self.csi[index], bsnr=self.bsnr[index], labels=self.labels[index])

    def concat(self, other: "SensingData") -> "SensingData":
        return replace(
            self,
            csi=np.concatenate([self.csi, other.csi]),
            bsnr=np.concatenate([self.bsnr, other.bsnr]),
            labels=np.concatenate([self.labels, other.labels]),
        )


def prepare_data(ds: Dataset, stats: CalibStats, dtype=np.float32) -> SensingData:
    """Guard removal, phase calibration and CSI standardization for a whole dataset."""
    csi = standardize_csi_batch(csi_features(ds.csi, ds.guard_mask), stats).astype(dtype)
    return SensingData(
        csi, np.asarray(ds.bsnr, dtype=float).astype(dtype), stats.bsnr_mean.astype(dtype), stats.bsnr_std.astype(dtype),
        ds.labels.copy(), ds.num_classes,
    )


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


def _per_class_count(n: int, fraction: float) -> int:
    return int(math.floor(fraction * n + 1e-9))


def split_labeled_fraction(dataset, fraction: float, seed: int = 0):
    """Stratified (labeled subset, unlabeled pool).

    Each class keeps ``floor(fraction * n_class)`` labels; the pool has its
    labels stripped.  Already-unlabeled samples go straight to the pool.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    labels = np.asarray(dataset.labels)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5B117]))
    keep = []
    for c in np.unique(labels[labels >= 0]):
        idx = np.flatnonzero(labels == c)
        k = _per_class_count(idx.size, fraction)
        if k == 0:
            raise ValueError(f"fraction {fraction} leaves class {c} with no labeled samples")
        keep.append(np.sort(rng.permutation(idx)[:k]))
    keep = np.sort(np.concatenate(keep)) if keep else np.zeros(0, dtype=np.int64)
    rest = np.setdiff1d(np.arange(labels.shape[0]), keep)
    labeled = dataset.subset(keep)
    pool = dataset.subset(rest)
    pool.labels = np.full(rest.shape[0], -1, dtype=np.int64)
    return labeled, pool


def stratified_holdout(labels: np.ndarray, fraction: float, seed: int):
    """Indices (train, val) with ``round(fraction * n_class)`` of each class held out.

    Unlabeled samples are split at random as a single group.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7A1]))
    val = []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        k = int(round(fraction * idx.size))
        if idx.size >= 2:
            k = min(max(k, 1), idx.size - 1)
        else:
            k = 0
        val.append(idx[:k])
    val = np.sort(np.concatenate(val)) if val else np.zeros(0, dtype=np.int64)
    train = np.setdiff1d(np.arange(labels.shape[0]), val)
    return train, val


# ---------------------------------------------------------------------------
# History
# ---------------------------------------------------------------------------

HISTORY_FIELDS = ("epoch", "train_loss", "val_loss", "val_acc", "mse_csi", "mse_bsnr")


@dataclass
class History:
    rows: list = field(default_factory=list)
    initial: Optional[dict] = None
    best_epoch: int = 0

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    @property
    def best_val_loss(self) -> float:
        vals = [r["val_loss"] for r in self.rows if r["val_loss"] is not None]
        return min(vals) if vals else float("nan")

    def to_csv(self, path, include_initial: bool = True) -> None:
        rows = ([self.initial] if include_initial and self.initial else []) + self.rows
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_FIELDS)
            for r in rows:
                w.writerow(["" if r.get(k) is None else (r[k] if k == "epoch" else repr(float(r[k]))) for k in HISTORY_FIELDS])

    def to_dict(self) -> dict:
        return {"rows": self.rows, "initial": self.initial, "best_epoch": self.best_epoch}


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    chunks = [order[s:s + batch_size] for s in range(0, n, batch_size)]
    # a trailing batch of one would break batchnorm statistics
    if len(chunks) > 1 and chunks[-1].size == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def _tensors(model, data: SensingData, idx, scale=None):
    dtype = next(model.parameters()).dtype
    csi = torch.as_tensor(data.csi[idx], dtype=dtype)
    raw = data.bsnr[idx] if scale is None else data.bsnr[idx] * scale[:, None]
    bsnr = torch.as_tensor((raw - data.bsnr_mean) / data.bsnr_std, dtype=dtype)
    return csi, bsnr


def _set_train_mode(model: FusionModel, frozen_encoders: bool) -> None:
    model.train()
    if frozen_encoders:
        for enc in model.encoder_modules():
            enc.eval()


@torch.no_grad()
def _eval_classification(model, data: SensingData, batch_size: int = 256):
    model.eval()
    if len(data) == 0:
        return None, None
    losses, preds = [], []
    for s in range(0, len(data), batch_size):
        idx = np.arange(s, min(s + batch_size, len(data)))
        csi, bsnr = _tensors(model, data, idx)
        logits = model(csi, bsnr)
        labels = torch.as_tensor(data.labels[idx])
        losses.append(classification_loss(logits, labels).item() * idx.size)
        preds.append(logits.argmax(dim=-1).numpy())
    n_cls = model.arch.dims.num_classes
    cm = confusion_from_predictions(np.concatenate(preds), data.labels, n_cls)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        acc = average_accuracy(cm)
    return sum(losses) / len(data), acc


def _ae_losses(model: FusionModel, csi, bsnr, lam: float):
    """(weighted loss, csi mse, bsnr mse); branches with zero weight are not decoded."""
    f = model.latent(csi, bsnr)
    t_c, t_h = model.reconstruction_targets(csi, bsnr)
    if t_h is None:
        lam = 1.0
    elif t_c is None:
        lam = 0.0
    need_c = t_c is not None and lam > 0
    need_h = t_h is not None and lam < 1
    c_hat, h_hat = model.reconstruct(f, csi=need_c, bsnr=need_h)
    mse_c = branch_mse(c_hat, t_c) if need_c else None
    mse_h = branch_mse(h_hat, t_h) if need_h else None
    loss = weighted_mse(c_hat, t_c, h_hat, t_h, lam)
    return loss, mse_c, mse_h


@torch.no_grad()
def _eval_autoencoder(model, data: SensingData, lam: float, batch_size: int = 256):
    model.eval()
    tot = {"loss": 0.0, "c": 0.0, "h": 0.0}
    have = {"c": False, "h": False}
    for s in range(0, len(data), batch_size):
        idx = np.arange(s, min(s + batch_size, len(data)))
        csi, bsnr = _tensors(model, data, idx)
        f = model.latent(csi, bsnr)
        t_c, t_h = model.reconstruction_targets(csi, bsnr)
        c_hat, h_hat = model.reconstruct(f)
        w = idx.size
        mse_c = branch_mse(c_hat, t_c).item() if t_c is not None else None
        mse_h = branch_mse(h_hat, t_h).item() if t_h is not None else None
        eff = 1.0 if mse_h is None else 0.0 if mse_c is None else lam
        loss = (eff * mse_c if mse_c is not None else 0.0) + ((1 - eff) * mse_h if mse_h is not None else 0.0)
        tot["loss"] += loss * w
        if mse_c is not None:
            tot["c"] += mse_c * w
            have["c"] = True
        if mse_h is not None:
            tot["h"] += mse_h * w
            have["h"] = True
    n = max(len(data), 1)
    return tot["loss"] / n, (tot["c"] / n if have["c"] else None), (tot["h"] / n if have["h"] else None)


class _EarlyStopper:
    def __init__(self, model, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.best_state = copy.deepcopy(model.state_dict())
        self.bad = 0

    def update(self, model, epoch: int, val_loss: Optional[float]) -> bool:
        """Record an epoch; returns True when training should stop."""
        if val_loss is None:
            self.best_state = copy.deepcopy(model.state_dict())
            self.best_epoch = epoch
            return False
        if val_loss < self.best:
            self.best, self.best_epoch, self.bad = val_loss, epoch, 0
            self.best_state = copy.deepcopy(model.state_dict())
            return False
        self.bad += 1
        return self.patience > 0 and self.bad >= self.patience

    def restore(self, model) -> None:
        model.load_state_dict(self.best_state)


def _run(model, data, cfg, rates, step_loss, evaluate, frozen_encoders=False, history=None):
    """Shared epoch loop: Adam with per-group rates, validation, early stopping."""
    history = history or History()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xE90C]))
    train_idx, val_idx = stratified_holdout(data.labels, cfg.val_fraction, cfg.seed) if cfg.val_fraction > 0 else (np.arange(len(data)), np.zeros(0, dtype=np.int64))
    train, val = data.subset(train_idx), data.subset(val_idx)
    history.initial = {"epoch": 0, **evaluate(model, train, val)}
    stopper = _EarlyStopper(model, cfg.early_stop_patience)
    stopper.best = history.initial["val_loss"] if history.initial.get("val_loss") is not None else math.inf
    state = AdamState()
    params = []
    for n, p, g in model.grouped_parameters():
        p.requires_grad_(rates.get(g, 0) > 0)
        if p.requires_grad:
            params.append((n, p, g))
    for epoch in range(1, cfg.epochs + 1):
        _set_train_mode(model, frozen_encoders)
        total, count = 0.0, 0
        for idx in _batches(len(train), cfg.batch_size, rng):
            scale = draw_scale(rng, idx.size) if cfg.augment_bsnr else None
            csi, bsnr = _tensors(model, train, idx, scale)
            for _, p, _ in params:
                p.grad = None
            loss = step_loss(model, csi, bsnr, train.labels[idx])
            loss.backward()
            adam_step(params, rates, state)
            total += loss.item() * idx.size
            count += idx.size
        row = {"epoch": epoch, "train_loss": total / max(count, 1), **evaluate(model, train, val)}
        history.rows.append(row)
        if stopper.update(model, epoch, row.get("val_loss")):
            break
    for p in model.parameters():
        p.requires_grad_(True)
    if cfg.epochs > 0 and len(val):
        stopper.restore(model)
    history.best_epoch = stopper.best_epoch
    model.eval()
    return model, history


def train_supervised(model: FusionModel, data: SensingData, cfg: TrainConfig):
    """End-to-end cross-entropy training, every group at ``cfg.lr_head``."""
    if model.head is None:
        raise ValueError("supervised training needs a model with a task head")
    labeled = np.flatnonzero(data.labels >= 0)
    if labeled.size == 0:
        raise ValueError("no labeled samples to train on")
    data = data.subset(labeled)
    rates = {g: cfg.lr_head for g in ("head", "fusion_weights", "fusion_proj", "encoder", "decoder")}

    def step_loss(m, csi, bsnr, labels):
        return classification_loss(m(csi, bsnr), torch.as_tensor(labels))

    def evaluate(m, train, val):
        loss, acc = _eval_classification(m, val)
        return {"val_loss": loss, "val_acc": acc, "mse_csi": None, "mse_bsnr": None}

    return _run(model, data, cfg, rates, step_loss, evaluate)


def pretrain_autoencoder(model: FusionModel, data: SensingData, cfg: TrainConfig):
    """Weighted-MSE reconstruction of both branches from the fused latent; labels ignored."""
    if model.csi_decoder is None and model.bsnr_decoder is None:
        raise ValueError("pretraining needs a model built with decoders")
    if len(data) == 0:
        raise ValueError("empty pretraining set")
    data = replace(data, labels=np.full(len(data), -1, dtype=np.int64))
    rates = cfg.group_rates()
    lam = cfg.lam

    def step_loss(m, csi, bsnr, labels):
        return _ae_losses(m, csi, bsnr, lam)[0]

    def evaluate(m, train, val):
        loss, mse_c, mse_h = _eval_autoencoder(m, val if len(val) else train, lam)
        return {"val_loss": loss, "val_acc": None, "mse_csi": mse_c, "mse_bsnr": mse_h}

    return _run(model, data, cfg, rates, step_loss, evaluate)


TRANSFER_PREFIXES = ("csi_encoder.", "bsnr_encoder.", "fusion.")


def finetune_transfer(pretrained: FusionModel, data: SensingData, num_classes: int, cfg: TrainConfig):
    """Freeze encoders, fine-tune the fusion block, drop decoders, train a fresh head."""
    arch = pretrained.arch
    model = build_model(arch.variant, dims=replace(arch.dims, num_classes=num_classes), with_head=True,
                        with_decoders=False, dtype=next(pretrained.parameters()).dtype, seed=cfg.seed)
    src = pretrained.state_dict()
    dst = model.state_dict()
    for name in dst:
        if name.startswith(TRANSFER_PREFIXES):
            if name not in src or src[name].shape != dst[name].shape:
                raise ValueError(f"pretrained model does not match architecture at {name}")
            dst[name] = src[name].clone()
    model.load_state_dict(dst)
    labeled = np.flatnonzero(data.labels >= 0)
    if labeled.size == 0:
        raise ValueError("no labeled samples to fine-tune on")
    data = data.subset(labeled)
    rates = cfg.group_rates()
    rates["encoder"] = 0.0
    rates["decoder"] = 0.0

    def step_loss(m, csi, bsnr, labels):
        return classification_loss(m(csi, bsnr), torch.as_tensor(labels))

    def evaluate(m, train, val):
        loss, acc = _eval_classification(m, val)
        return {"val_loss": loss, "val_acc": acc, "mse_csi": None, "mse_bsnr": None}

    return _run(model, data, cfg, rates, step_loss, evaluate, frozen_encoders=True)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
