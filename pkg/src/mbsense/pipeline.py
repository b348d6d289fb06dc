"""Run orchestration behind the command line: datasets, checkpoints, metrics and sweeps.

A run directory looks like::

    <out>/config.json            effective configuration (reloadable with --config)
    <out>/run.json               seed, git describe, package version, last command
    <out>/dataset/{train,test}/  simulated datasets
    <out>/dataset/calib_stats.json
    <out>/checkpoints/{supervised,pretrained,finetuned}/
    <out>/history.csv            supervised history; pretrain/finetune get suffixed files
    <out>/metrics/               confusion.csv, metrics.json, latents.csv
    <out>/sweep/<axis>/          per-job results and summary.csv
"""

from __future__ import annotations

import csv
import json
import subprocess
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import __version__
from .calib import CalibStats, fit_calib_stats
from .channel import (
    concat_datasets,
    default_subcarrier_grid,
    generate_dataset,
    load_dataset,
    make_scenes,
    save_dataset,
    synthesize_beam_patterns,
)
from .config import SWEEP_AXES, ExperimentConfig, dumps, from_dict, to_dict
from .evaluate import average_accuracy, confusion_matrix, export_latents, write_metrics
from .fusion import Architecture, build_model, learning_group, model_from_architecture
from .nn import load_weights, read_checkpoint_manifest, save_checkpoint
from .train import (
    SensingData,
    finetune_transfer,
    prepare_data,
    pretrain_autoencoder,
    split_labeled_fraction,
    train_supervised,
)


def derive_seed(seed: int, *tags: int) -> int:
    """Independent 63-bit seed for a (run seed, tag...) combination."""
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1, np.uint64)[0] >> 1)


def git_describe() -> str:
    try:
        res = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).resolve().parent,
            capture_output=True, text=True, timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return res.stdout.strip() if res.returncode == 0 and res.stdout.strip() else "unknown"


def run_dir(cfg: ExperimentConfig, out: Optional[str] = None) -> Path:
    return Path(out or cfg.output_dir or f"runs/{cfg.name}")


def write_run_info(cfg: ExperimentConfig, root: Path, command: str) -> None:
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.json").write_text(dumps(cfg))
    info = {"command": command, "seed": cfg.seed, "git_describe": git_describe(), "version": __version__}
    (root / "run.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def simulate(cfg: ExperimentConfig, root: Path) -> Path:
    """Simulate the train and test sets for ``cfg.task`` and fit calibration statistics."""
    sim = cfg.sim
    scenes = make_scenes(cfg.num_classes, sim.scene_seed, sim.scene)
    patterns = synthesize_beam_patterns(sim.num_beams, sim.scene_seed)
    freqs, mask = default_subcarrier_grid(sim.num_subcarriers, sim.num_guards)
    if len(sim.impairments.rf_chain_phase_offsets_rad) != sim.num_streams:
        raise ValueError("impairments.rf_chain_phase_offsets_rad needs one entry per stream")
    echo = to_dict(cfg)
    common = dict(patterns=patterns, subcarrier_freqs_hz=freqs, guard_mask=mask,
                  num_streams=sim.num_streams, num_classes=cfg.num_classes, config=echo)
    train = generate_dataset(scenes, sim.snapshots_per_class, sim.impairments, sim.labeled_fraction,
                             derive_seed(cfg.seed, 1), split_tag="train", **common)
    test = generate_dataset(scenes, sim.test_snapshots_per_class, sim.impairments, 1.0,
                            derive_seed(cfg.seed, 2), split_tag="test", **common)
    out = root / "dataset"
    save_dataset(train, out / "train")
    save_dataset(test, out / "test")
    fit_calib_stats(train).save(out / "calib_stats.json")
    return out


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def load_split(root: Path, split: str, stats: Optional[CalibStats] = None, dataset_dir: Optional[Path] = None):
    """Load a dataset split and prepare it with the run's calibration statistics."""
    ds_dir = _require(Path(dataset_dir) if dataset_dir else root / "dataset" / split, "dataset")
    stats = stats or CalibStats.load(_require(root / "dataset" / "calib_stats.json", "calibration statistics"))
    ds = load_dataset(ds_dir)
    return ds, prepare_data(ds, stats), stats


def _check_classes(cfg: ExperimentConfig, n: int, where) -> None:
    if n != cfg.num_classes:
        raise ValueError(f"dataset {where} has {n} classes but task {cfg.task!r} needs {cfg.num_classes}")


# ---------------------------------------------------------------------------
# Training protocols
# ---------------------------------------------------------------------------


def _save(model, directory: Path) -> Path:
    return save_checkpoint(model, directory, model.architecture_dict(), learning_group)


def _summary(path: Path, history, extra: dict) -> None:
    body = {"best_epoch": history.best_epoch, "epochs_run": len(history), "initial": history.initial,
            "best_val_loss": history.best_val_loss if history.rows else None, **extra}
    path.write_text(json.dumps(body, indent=2, sort_keys=True, default=float) + "\n")


def train(cfg: ExperimentConfig, root: Path) -> Path:
    ds, data, _ = load_split(root, "train")
    _check_classes(cfg, ds.num_classes, root / "dataset" / "train")
    labeled, _ = split_labeled_fraction(data, cfg.train.labeled_fraction, cfg.train.seed)
    model = build_model(cfg.variant, dims=cfg.model_dims(), seed=cfg.train.seed)
    model, hist = train_supervised(model, labeled, cfg.train)
    ckpt = _save(model, root / "checkpoints" / "supervised")
    hist.to_csv(root / "history.csv")
    _summary(root / "train_summary.json", hist, {"labeled_samples": len(labeled)})
    return ckpt


def _pretrain_data(cfg: ExperimentConfig, root: Path) -> SensingData:
    _, data, stats = load_split(root, "train")
    for extra in cfg.pool_datasets:
        pooled = load_dataset(_require(Path(extra), "pooled dataset"))
        data = data.concat(prepare_data(concat_datasets([pooled], drop_labels=True), stats))
    return data


def pretrain(cfg: ExperimentConfig, root: Path) -> Path:
    data = _pretrain_data(cfg, root)
    model = build_model(cfg.variant, dims=cfg.model_dims(), with_head=False, with_decoders=True, seed=cfg.pretrain.seed)
    model, hist = pretrain_autoencoder(model, data, cfg.pretrain)
    ckpt = _save(model, root / "checkpoints" / "pretrained")
    hist.to_csv(root / "history_pretrain.csv")
    _summary(root / "pretrain_summary.json", hist, {"samples": len(data), "lambda": cfg.pretrain.lam})
    return ckpt


def _arch_key(arch: dict) -> dict:
    dims = dict(arch["dims"])
    dims.pop("num_classes", None)
    return {"variant": arch["variant"], "dims": dims}


def load_checkpoint(directory: Path, expected: Optional[ExperimentConfig] = None, dtype=torch.float32):
    """Rebuild a model from its manifest; with ``expected``, the architecture must match the config."""
    directory = Path(directory)
    manifest = read_checkpoint_manifest(_require(directory, "checkpoint"))
    arch = manifest["architecture"]
    if expected is not None:
        want = _arch_key(Architecture(expected.variant, expected.model_dims()).to_dict())
        have = _arch_key(arch)
        if want != have:
            raise ValueError(f"architecture mismatch: config {json.dumps(want, sort_keys=True)} "
                             f"vs checkpoint {directory} {json.dumps(have, sort_keys=True)}")
    model = model_from_architecture(arch, dtype)
    load_weights(model, directory)
    model.eval()
    return model


def finetune(cfg: ExperimentConfig, root: Path, pretrained: Optional[Path] = None) -> Path:
    src = Path(pretrained) if pretrained else root / "checkpoints" / "pretrained"
    base = load_checkpoint(src, cfg)
    ds, data, _ = load_split(root, "train")
    _check_classes(cfg, ds.num_classes, root / "dataset" / "train")
    labeled, _ = split_labeled_fraction(data, cfg.finetune.labeled_fraction, cfg.finetune.seed)
    model, hist = finetune_transfer(base, labeled, cfg.num_classes, cfg.finetune)
    ckpt = _save(model, root / "checkpoints" / "finetuned")
    hist.to_csv(root / "history_finetune.csv")
    _summary(root / "finetune_summary.json", hist, {"labeled_samples": len(labeled), "pretrained": src.name})
    return ckpt


def default_checkpoint(root: Path) -> Path:
    for name in ("finetuned", "supervised"):
        if (root / "checkpoints" / name / "weights.json").exists():
            return root / "checkpoints" / name
    raise FileNotFoundError(f"no trained checkpoint under {root / 'checkpoints'}")


def evaluate(cfg: ExperimentConfig, root: Path, checkpoint: Optional[Path] = None,
             dataset: Optional[Path] = None, latents: bool = False) -> dict:
    ckpt = Path(checkpoint) if checkpoint else default_checkpoint(root)
    model = load_checkpoint(ckpt)
    if model.head is None:
        raise ValueError(f"checkpoint {ckpt} has no classification head")
    ds, data, _ = load_split(root, "test", dataset_dir=dataset)
    n_model = model.arch.dims.num_classes
    if ds.num_classes != n_model:
        raise ValueError(f"dataset has {ds.num_classes} classes but checkpoint {ckpt} predicts {n_model}")
    cm = confusion_matrix(model, data)
    out = write_metrics(cm, root / "metrics", {"variant": model.arch.variant, "num_samples": len(data)})
    if latents:
        export_latents(model, data, out / "latents.csv")
    return cm.summary()


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


def _job_id(spec: dict) -> str:
    parts = [spec["kind"], spec["variant"]]
    for key in ("labeled_fraction", "latent_dim", "finetune_lr", "lambda"):
        if key in spec:
            parts.append(f"{key}={spec[key]:g}")
    parts.append(f"rep={spec['replicate']}")
    return "__".join(parts)


def _job_config(spec: dict) -> ExperimentConfig:
    cfg = from_dict(spec["config"]).with_seed(spec["seed"])
    cfg.variant = spec["variant"]
    if "latent_dim" in spec:
        cfg.model.latent_dim = int(spec["latent_dim"])
    if "lambda" in spec:
        cfg.pretrain = replace(cfg.pretrain, lam=float(spec["lambda"]))
    if "finetune_lr" in spec:
        cfg.finetune = replace(cfg.finetune, lr_fusion_weights=float(spec["finetune_lr"]))
    if "labeled_fraction" in spec:
        cfg.train = replace(cfg.train, labeled_fraction=float(spec["labeled_fraction"]))
        cfg.finetune = replace(cfg.finetune, labeled_fraction=float(spec["labeled_fraction"]))
    return cfg


def _pretrain_key(spec: dict) -> dict:
    keep = {k: spec[k] for k in ("variant", "replicate", "seed", "config") if k in spec}
    keep["kind"] = "pretrain"
    keep["latent_dim"] = spec.get("latent_dim", spec["config"]["model"]["latent_dim"])
    keep["lambda"] = spec.get("lambda", spec["config"]["pretrain"]["lam"])
    return keep


def _run_job(spec: dict) -> dict:
    """Execute one sweep job in isolation; results land in ``spec['dir']``."""
    torch.set_num_threads(1)
    job_dir = Path(spec["dir"])
    done = job_dir / "result.json"
    if done.exists():
        return json.loads(done.read_text())
    root = Path(spec["root"])
    cfg = _job_config(spec)
    job_dir.mkdir(parents=True, exist_ok=True)
    _, train_data, stats = load_split(root, "train")
    result = {k: v for k, v in spec.items() if k not in ("config", "dir", "root", "pretrained")}
    if spec["kind"] == "pretrain":
        data = _pretrain_data(cfg, root)
        model = build_model(cfg.variant, dims=cfg.model_dims(), with_head=False, with_decoders=True, seed=cfg.seed)
        model, hist = pretrain_autoencoder(model, data, cfg.pretrain)
        _save(model, job_dir / "checkpoint")
        hist.to_csv(job_dir / "history.csv")
        result["best_val_loss"] = hist.best_val_loss
        result["initial_val_loss"] = hist.initial["val_loss"]
    else:
        if spec["kind"] == "supervised":
            labeled, _ = split_labeled_fraction(train_data, cfg.train.labeled_fraction, cfg.seed)
            model = build_model(cfg.variant, dims=cfg.model_dims(), seed=cfg.seed)
            model, hist = train_supervised(model, labeled, cfg.train)
        else:
            base = load_checkpoint(Path(spec["pretrained"]), cfg)
            labeled, _ = split_labeled_fraction(train_data, cfg.finetune.labeled_fraction, cfg.seed)
            model, hist = finetune_transfer(base, labeled, cfg.num_classes, cfg.finetune)
        hist.to_csv(job_dir / "history.csv")
        _, test_data, _ = load_split(root, "test", stats)
        cm = confusion_matrix(model, test_data)
        result["accuracy"] = average_accuracy(cm)
        result["labeled_samples"] = len(labeled)
    result["epochs_run"] = len(hist)
    done.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result


def sweep_jobs(cfg: ExperimentConfig, root: Path, axis: str) -> tuple[list[dict], list[dict]]:
    """Expand ``axis`` into (pretraining jobs, evaluation jobs)."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    s = cfg.sweep
    values = {"labeled_fraction": s.labeled_fraction, "latent_dim": s.latent_dim,
              "finetune_lr": s.finetune_lr, "lambda": s.lambda_}[axis]
    if not values:
        raise ValueError(f"sweep axis {axis!r} has no values")
    if not s.seeds:
        raise ValueError("sweep.seeds is empty")
    if axis == "labeled_fraction" and not s.variants:
        raise ValueError("sweep.variants is empty")
    echo = to_dict(cfg)
    sweep_root = root / "sweep"
    points = []
    if axis == "labeled_fraction":
        kind = "supervised" if s.protocol == "supervised" else "transfer"
        points = [{"kind": kind, "variant": v, "labeled_fraction": float(f)} for f in values for v in s.variants]
    elif axis == "latent_dim":
        points = [{"kind": "transfer", "variant": cfg.variant, "latent_dim": int(d), "finetune_lr": float(lr)}
                  for d in values for lr in s.finetune_lr]
        if not s.finetune_lr:
            raise ValueError("sweep axis 'finetune_lr' has no values")
    elif axis == "finetune_lr":
        points = [{"kind": "transfer", "variant": cfg.variant, "finetune_lr": float(lr)} for lr in values]
    else:
        points = [{"kind": "transfer", "variant": cfg.variant, "lambda": float(lam)} for lam in values]

    pre, jobs = {}, []
    for point in points:
        for rep in s.seeds:
            spec = {**point, "replicate": int(rep), "seed": derive_seed(cfg.seed, int(rep)), "config": echo,
                    "root": str(root)}
            spec["dir"] = str(sweep_root / axis / "jobs" / _job_id(spec))
            if spec["kind"] == "transfer":
                key = _pretrain_key(spec)
                pid = _job_id(key)
                if pid not in pre:
                    pre[pid] = {**key, "root": str(root), "dir": str(sweep_root / "pretrain" / pid)}
                spec["pretrained"] = str(Path(pre[pid]["dir"]) / "checkpoint")
            jobs.append(spec)
    return list(pre.values()), jobs


def _execute(specs: list[dict], workers: int) -> list[dict]:
    if workers <= 1 or len(specs) <= 1:
        return [_run_job(s) for s in specs]
    with ProcessPoolExecutor(max_workers=min(workers, len(specs))) as pool:
        return list(pool.map(_run_job, specs))


SUMMARY_FIELDS = ("protocol", "variant", "labeled_fraction", "latent_dim", "finetune_lr", "lambda",
                  "accuracy_mean", "accuracy_std", "replicates")


def sweep(cfg: ExperimentConfig, root: Path, axis: str, workers: int = 1) -> Path:
    """Run every job of ``axis`` (skipping finished ones) and write ``summary.csv``."""
    pre_jobs, jobs = sweep_jobs(cfg, root, axis)
    if not (root / "dataset" / "calib_stats.json").exists():
        simulate(cfg, root)
    _execute(pre_jobs, workers)
    results = _execute(jobs, workers)
    groups: dict = {}
    for spec, res in zip(jobs, results):
        key = tuple(spec.get(k) for k in ("kind", "variant", "labeled_fraction", "latent_dim", "finetune_lr", "lambda"))
        groups.setdefault(key, []).append(res["accuracy"])
    out = root / "sweep" / axis / "summary.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    defaults = {"latent_dim": cfg.model.latent_dim, "finetune_lr": cfg.finetune.lr_fusion_weights,
                "lambda": cfg.pretrain.lam}
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_FIELDS)
        for (kind, variant, frac, d, lr, lam), accs in groups.items():
            transfer = kind == "transfer"
            if frac is None:
                frac = (cfg.finetune if transfer else cfg.train).labeled_fraction
            row = [kind, variant, frac,
                   d if d is not None else defaults["latent_dim"],
                   (lr if lr is not None else defaults["finetune_lr"]) if transfer else "",
                   (lam if lam is not None else defaults["lambda"]) if transfer else "",
                   repr(float(np.mean(accs))), repr(float(np.std(accs))), len(accs)]
            w.writerow(row)
    return out


def worker_count(requested: Optional[int]) -> int:
    if requested is None:
        return 1
    if requested < 1:
        raise ValueError("--jobs must be >= 1")
    return requested
