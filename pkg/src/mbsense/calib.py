"""CSI and beam SNR preprocessing: guard removal, linear phase calibration,
per-cell standardization and beam SNR scale augmentation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .channel import BeamSnrVector, CsiFrame, Dataset

STD_FLOOR = 1e-6
AUGMENT_RANGE = (0.9, 1.2)


@dataclass(frozen=True)
class CalibStats:
    amp_mean: np.ndarray  # (streams, active subcarriers)
    amp_std: np.ndarray
    phase_mean: np.ndarray
    phase_std: np.ndarray
    bsnr_mean: np.ndarray  # (beams,)
    bsnr_std: np.ndarray

    def to_json(self) -> str:
        return json.dumps({k: np.asarray(v).tolist() for k, v in self.__dict__.items()}, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "CalibStats":
        d = json.loads(text)
        return cls(**{k: np.asarray(d[k], dtype=float) for k in cls.__dataclass_fields__})

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "CalibStats":
        return cls.from_json(Path(path).read_text())

    @property
    def csi_shape(self) -> tuple[int, int]:
        return self.amp_mean.shape


def remove_guard_subcarriers(frame: CsiFrame) -> CsiFrame:
    keep = ~frame.guard_mask
    if not keep.any():
        raise ValueError("every subcarrier is a guard; nothing left")
    return CsiFrame(frame.values[:, keep], frame.subcarrier_freqs_hz[keep], np.zeros(int(keep.sum()), dtype=bool))


def linear_phase_residual(values: np.ndarray) -> np.ndarray:
    """Unwrapped phase minus its least-squares line, along the last axis.

    Works on any leading shape; the fit is per row.
    """
    m = values.shape[-1]
    if m < 3:
        raise ValueError("phase calibration needs at least 3 subcarriers")
    phase = np.unwrap(np.angle(values), axis=-1)
    k = np.arange(m, dtype=float)
    kc = k - k.mean()
    slope = (phase * kc).sum(axis=-1, keepdims=True) / (kc @ kc)
    intercept = phase.mean(axis=-1, keepdims=True) - slope * k.mean()
    return phase - (slope * k + intercept)


def calibrate_phase_linear(frame: CsiFrame) -> CsiFrame:
    """Remove per-stream linear phase (SFO/PBD/CFO/RF offsets), keep magnitudes."""
    residual = linear_phase_residual(frame.values)
    values = np.abs(frame.values) * np.exp(1j * residual)
    return CsiFrame(values, frame.subcarrier_freqs_hz, frame.guard_mask)


def csi_features(csi: np.ndarray, guard_mask: np.ndarray) -> np.ndarray:
    """Raw CSI batch (n, streams, subcarriers) -> (n, 2*streams, active) amplitude/phase channels."""
    active = np.asarray(csi)[..., ~np.asarray(guard_mask, dtype=bool)]
    amp = np.abs(active).astype(float)
    phase = linear_phase_residual(active.astype(np.complex128))
    return np.concatenate([amp, phase], axis=-2)


def _floored_moments(x: np.ndarray):
    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), STD_FLOOR)
    return mean, std


def fit_calib_stats(train: Dataset) -> CalibStats:
    """Per-(stream, subcarrier) CSI moments and per-beam beam SNR moments of the training split."""
    if len(train) == 0:
        raise ValueError("cannot fit calibration stats on an empty dataset")
    feats = csi_features(train.csi, train.guard_mask)
    n_s = train.csi.shape[1]
    amp_mean, amp_std = _floored_moments(feats[:, :n_s])
    ph_mean, ph_std = _floored_moments(feats[:, n_s:])
    b_mean, b_std = _floored_moments(np.asarray(train.bsnr, dtype=float))
    return CalibStats(amp_mean, amp_std, ph_mean, ph_std, b_mean, b_std)


def standardize_csi_batch(feats: np.ndarray, stats: CalibStats) -> np.ndarray:
    mean = np.concatenate([stats.amp_mean, stats.phase_mean], axis=0)
    std = np.concatenate([stats.amp_std, stats.phase_std], axis=0)
    if feats.shape[-2:] != mean.shape:
        raise ValueError(f"CSI features {feats.shape[-2:]} do not match stats {mean.shape}")
    return (feats - mean) / std


def standardize_bsnr_batch(bsnr: np.ndarray, stats: CalibStats) -> np.ndarray:
    if bsnr.shape[-1] != stats.bsnr_mean.shape[0]:
        raise ValueError(f"beam SNR width {bsnr.shape[-1]} does not match stats {stats.bsnr_mean.shape[0]}")
    return (bsnr - stats.bsnr_mean) / stats.bsnr_std


def standardize(sample: Union[CsiFrame, BeamSnrVector], stats: CalibStats) -> np.ndarray:
    """Standardize one sample.  CSI frames come out as (2*streams, active subcarriers)."""
    if isinstance(sample, CsiFrame):
        feats = csi_features(sample.values[None], sample.guard_mask)[0]
        return standardize_csi_batch(feats, stats)
    if isinstance(sample, BeamSnrVector):
        return standardize_bsnr_batch(sample.values, stats)
    raise TypeError(f"cannot standardize {type(sample).__name__}")


def draw_scale(rng: np.random.Generator, size=None):
    return rng.uniform(AUGMENT_RANGE[0], AUGMENT_RANGE[1], size=size)


def augment_beam_snr(bsnr: BeamSnrVector, rng_seed) -> BeamSnrVector:
    """Scale the whole vector by one draw from U[0.9, 1.2]."""
    scale = draw_scale(np.random.default_rng(rng_seed))
    return BeamSnrVector(bsnr.values * scale, quantized=False, in_db=bsnr.in_db)
