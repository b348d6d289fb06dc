"""Synthetic multi-band channel generation.

Sub-7 GHz CSI is produced by sampling the multipath channel frequency response
on an OFDM subcarrier grid; 60 GHz beam SNRs come from weighting per-path
powers with directional beampattern gains.  Classes are fixed scatterer layouts
and snapshots are Gaussian perturbations of those layouts.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path as FsPath
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter1d

SPEED_OF_LIGHT = 299_792_458.0
BSNR_STEP_DB = 0.25

DEFAULT_CARRIER_HZ = 5.21e9
DEFAULT_SUBCARRIER_SPACING_HZ = 312.5e3
DEFAULT_NUM_SUBCARRIERS = 242
DEFAULT_NUM_GUARDS = 8
DEFAULT_NUM_STREAMS = 3
DEFAULT_NUM_BEAMS = 36

DATASET_FORMAT = "mbsense-dataset/1"


@dataclass(frozen=True)
class Path:
    """One multipath component.

    ``power`` is derived from ``amplitude`` and cannot be set directly.
    """

    amplitude: float
    phase_rad: float = 0.0
    delay_s: float = 0.0
    azimuth_tx_rad: float = 0.0
    azimuth_rx_rad: float = 0.0
    power: float = field(init=False)

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError(f"path amplitude must be >= 0, got {self.amplitude}")
        if self.delay_s < 0:
            raise ValueError(f"path delay must be >= 0, got {self.delay_s}")
        object.__setattr__(self, "power", float(self.amplitude) ** 2)


@dataclass(frozen=True)
class JitterSpec:
    amplitude_rel: float = 0.1
    phase_rad: float = 0.1
    delay_s: float = 2e-11
    azimuth_rad: float = 0.04


@dataclass
class Scene:
    """A class fingerprint: sub-7 GHz paths plus the paths that survive at 60 GHz."""

    paths: list[Path]
    class_label: int
    jitter_spec: JitterSpec = field(default_factory=JitterSpec)
    mmwave_paths: Optional[list[Path]] = None

    def __post_init__(self):
        if not self.paths:
            raise ValueError("a scene needs at least one path")
        if self.class_label < 0:
            raise ValueError("class_label must be nonnegative")

    @property
    def beam_paths(self) -> list[Path]:
        return self.mmwave_paths if self.mmwave_paths is not None else self.paths


@dataclass
class BeamPattern:
    azimuth_grid_rad: np.ndarray
    tx_gain: np.ndarray
    rx_gain: np.ndarray
    beam_index: int

    def __post_init__(self):
        self.azimuth_grid_rad = np.asarray(self.azimuth_grid_rad, dtype=float)
        self.tx_gain = np.asarray(self.tx_gain, dtype=float)
        self.rx_gain = np.asarray(self.rx_gain, dtype=float)
        n = self.azimuth_grid_rad.shape[0]
        if self.tx_gain.shape != (n,) or self.rx_gain.shape != (n,):
            raise ValueError("gain tables must match the azimuth grid")
        if np.any(self.tx_gain < 0) or np.any(self.rx_gain < 0):
            raise ValueError("beampattern gains must be nonnegative")
        if np.any(np.diff(self.azimuth_grid_rad) <= 0):
            raise ValueError("azimuth grid must be strictly increasing")


@dataclass
class CsiFrame:
    values: np.ndarray  # complex, (streams, subcarriers)
    subcarrier_freqs_hz: np.ndarray
    guard_mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.subcarrier_freqs_hz = np.asarray(self.subcarrier_freqs_hz, dtype=float)
        self.guard_mask = np.asarray(self.guard_mask, dtype=bool)
        if self.values.ndim != 2:
            raise ValueError(f"CSI values must be 2-D (streams, subcarriers), got {self.values.shape}")
        m = self.values.shape[1]
        if self.subcarrier_freqs_hz.shape != (m,) or self.guard_mask.shape != (m,):
            raise ValueError("frequency grid and guard mask must match the subcarrier axis")

    @property
    def num_streams(self) -> int:
        return self.values.shape[0]

    @property
    def num_subcarriers(self) -> int:
        return self.values.shape[1]


@dataclass
class BeamSnrVector:
    """Beam SNRs, linear (as computed) or in dB (after quantization)."""

    values: np.ndarray
    quantized: bool = False
    in_db: bool = False
    n_clamped: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 1:
            raise ValueError("beam SNR vector must be 1-D")
        if np.any(self.values < 0):
            raise ValueError("beam SNR entries must be nonnegative")
        if self.quantized and not self.in_db:
            raise ValueError("quantized beam SNRs are stored in dB")


@dataclass(frozen=True)
class ImpairmentConfig:
    agc_gain_db_std: float = 1.0
    sfo_slope_rad_per_subcarrier_std: float = 0.05
    pbd_offset_rad_std: float = 1.0
    cfo_drift_rad_per_frame_std: float = 0.05
    rf_chain_phase_offsets_rad: tuple[float, ...] = (0.0, 0.7, -1.3)
    bsnr_quantize: bool = True
    noise_var: float = 0.01
    csi_noise_std: float = 0.0

    def __post_init__(self):
        stds = (
            self.agc_gain_db_std,
            self.sfo_slope_rad_per_subcarrier_std,
            self.pbd_offset_rad_std,
            self.cfo_drift_rad_per_frame_std,
            self.csi_noise_std,
        )
        if any(s < 0 for s in stds):
            raise ValueError("impairment standard deviations must be >= 0")
        if not self.noise_var > 0:
            raise ValueError("noise_var must be positive")
        object.__setattr__(
            self, "rf_chain_phase_offsets_rad", tuple(float(x) for x in self.rf_chain_phase_offsets_rad)
        )

    @classmethod
    def identity(cls, num_streams: int = DEFAULT_NUM_STREAMS, noise_var: float = 1.0) -> "ImpairmentConfig":
        return cls(0.0, 0.0, 0.0, 0.0, (0.0,) * num_streams, False, noise_var, 0.0)


@dataclass
class Dataset:
    """Index-aligned CSI / beam SNR pairs.  ``labels`` holds -1 for unlabeled samples."""

    csi: np.ndarray  # complex (n, streams, subcarriers)
    bsnr: np.ndarray  # (n, beams)
    labels: np.ndarray  # int (n,)
    subcarrier_freqs_hz: np.ndarray
    guard_mask: np.ndarray
    split_tag: str = "train"
    seed: int = 0
    bsnr_in_db: bool = False
    bsnr_quantized: bool = False
    num_classes: int = 0
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.csi.shape[0] != self.bsnr.shape[0] or self.csi.shape[0] != self.labels.shape[0]:
            raise ValueError("csi, bsnr and labels must be index-aligned")
        if self.split_tag not in ("train", "val", "test"):
            raise ValueError(f"unknown split tag {self.split_tag!r}")
        if self.num_classes and np.any(self.labels >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def labeled_mask(self) -> np.ndarray:
        return self.labels >= 0

    def frame(self, i: int) -> CsiFrame:
        return CsiFrame(self.csi[i], self.subcarrier_freqs_hz, self.guard_mask)

    def bsnr_vector(self, i: int) -> BeamSnrVector:
        return BeamSnrVector(self.bsnr[i], quantized=self.bsnr_quantized, in_db=self.bsnr_in_db)

    def subset(self, index: np.ndarray, *, keep_labels: bool = True) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        labels = self.labels[index] if keep_labels else np.full(index.shape[0], -1, dtype=np.int64)
        return Dataset(
            self.csi[index], self.bsnr[index], labels, self.subcarrier_freqs_hz, self.guard_mask,
            self.split_tag, self.seed, self.bsnr_in_db, self.bsnr_quantized, self.num_classes, self.config,
        )


# ---------------------------------------------------------------------------
# Channel equations
# ---------------------------------------------------------------------------


def _path_arrays(paths: Sequence[Path]):
    if len(paths) == 0:
        raise ValueError("path list is empty")
    amp = np.array([p.amplitude for p in paths], dtype=float)
    phase = np.array([p.phase_rad for p in paths], dtype=float)
    delay = np.array([p.delay_s for p in paths], dtype=float)
    az_tx = np.array([p.azimuth_tx_rad for p in paths], dtype=float)
    az_rx = np.array([p.azimuth_rx_rad for p in paths], dtype=float)
    return amp, phase, delay, az_tx, az_rx


def simulate_baseband_voltage(paths: Sequence[Path]) -> complex:
    amp, phase, *_ = _path_arrays(paths)
    return complex(np.sum(np.abs(amp) * np.exp(-1j * phase)))


def compute_rssi(voltage: complex) -> float:
    """Received power in dB.  Returns ``-inf`` (with a warning) for zero voltage."""
    power = abs(voltage) ** 2
    if power == 0:
        warnings.warn("zero received voltage; RSSI is -inf", RuntimeWarning, stacklevel=2)
        return float("-inf")
    return 10.0 * math.log10(power)


def half_wavelength(freq_hz: float = DEFAULT_CARRIER_HZ) -> float:
    return SPEED_OF_LIGHT / freq_hz / 2.0


def sample_cfr(
    paths: Sequence[Path],
    subcarrier_freqs_hz: np.ndarray,
    stream_index: int = 0,
    antenna_spacing_m: float = half_wavelength(),
) -> np.ndarray:
    """Channel frequency response of one spatial stream.

    Stream ``s`` sits ``s * antenna_spacing_m`` along a uniform linear receive
    array, so each path picks up an extra delay ``s * spacing * sin(psi) / c``.
    """
    freqs = np.asarray(subcarrier_freqs_hz, dtype=float)
    if freqs.ndim != 1 or freqs.size == 0:
        raise ValueError("subcarrier frequencies must be a nonempty 1-D array")
    if np.any(np.diff(freqs) <= 0):
        raise ValueError("subcarrier frequencies must be strictly increasing")
    amp, phase, delay, _, az_rx = _path_arrays(paths)
    tau = delay + stream_index * antenna_spacing_m * np.sin(az_rx) / SPEED_OF_LIGHT
    gains = amp * np.exp(-1j * phase)
    return np.exp(-2j * np.pi * np.outer(freqs, tau)) @ gains


def _wrap_angle(theta: np.ndarray) -> np.ndarray:
    return (np.asarray(theta) + np.pi) % (2 * np.pi) - np.pi


def _nearest_index(grid: np.ndarray, theta: np.ndarray) -> tuple[np.ndarray, int]:
    outside = (theta < grid[0]) | (theta > grid[-1])
    theta = np.clip(theta, grid[0], grid[-1])
    right = np.clip(np.searchsorted(grid, theta), 1, grid.size - 1)
    left = right - 1
    idx = np.where(theta - grid[left] <= grid[right] - theta, left, right)
    return idx, int(np.count_nonzero(outside))


def compute_beam_snr(paths: Sequence[Path], patterns: Sequence[BeamPattern], noise_var: float) -> BeamSnrVector:
    """Linear beam SNR per pattern, gains looked up at the nearest grid azimuth.

    Azimuths are wrapped to [-pi, pi); anything still outside a pattern's grid
    is clamped to the grid edge and counted in ``n_clamped``.
    """
    if not patterns:
        raise ValueError("need at least one beampattern")
    if not noise_var > 0:
        raise ValueError("noise_var must be positive")
    _, _, _, az_tx, az_rx = _path_arrays(paths)
    power = np.array([p.power for p in paths], dtype=float)
    az_tx = _wrap_angle(az_tx)
    az_rx = _wrap_angle(az_rx)
    out = np.empty(len(patterns))
    clamped = 0
    for m, pat in enumerate(patterns):
        i_tx, c_tx = _nearest_index(pat.azimuth_grid_rad, az_tx)
        i_rx, c_rx = _nearest_index(pat.azimuth_grid_rad, az_rx)
        clamped += c_tx + c_rx
        out[m] = np.sum(pat.tx_gain[i_tx] * pat.rx_gain[i_rx] * power) / noise_var
    if clamped:
        warnings.warn(f"{clamped} path azimuths clamped to the beampattern grid", RuntimeWarning, stacklevel=2)
    return BeamSnrVector(out, n_clamped=clamped)


def quantize_db(values_db: np.ndarray, step: float = BSNR_STEP_DB) -> np.ndarray:
    return np.round(np.asarray(values_db) / step) * step


def apply_impairments(
    frame: CsiFrame,
    bsnr: BeamSnrVector,
    cfg: ImpairmentConfig,
    rng_seed,
    *,
    frame_index: int = 0,
    cfo_rate: Optional[float] = None,
) -> tuple[CsiFrame, BeamSnrVector]:
    """Apply receiver impairments to one CSI frame and its beam SNRs.

    The CFO term is ``cfo_rate * frame_index``; when ``cfo_rate`` is None it is
    drawn from ``cfg``.  Beam SNRs below 0 dB are reported as 0 dB when
    quantizing.
    """
    rng = np.random.default_rng(rng_seed)
    n_s, m_s = frame.values.shape
    if len(cfg.rf_chain_phase_offsets_rad) < n_s:
        raise ValueError(f"need {n_s} RF-chain phase offsets, got {len(cfg.rf_chain_phase_offsets_rad)}")
    gain_db = rng.normal(0.0, cfg.agc_gain_db_std) if cfg.agc_gain_db_std > 0 else 0.0
    slope = rng.normal(0.0, cfg.sfo_slope_rad_per_subcarrier_std) if cfg.sfo_slope_rad_per_subcarrier_std > 0 else 0.0
    offset = rng.normal(0.0, cfg.pbd_offset_rad_std) if cfg.pbd_offset_rad_std > 0 else 0.0
    if cfo_rate is None:
        cfo_rate = rng.normal(0.0, cfg.cfo_drift_rad_per_frame_std) if cfg.cfo_drift_rad_per_frame_std > 0 else 0.0
    rf = np.asarray(cfg.rf_chain_phase_offsets_rad[:n_s], dtype=float)

    values = frame.values
    phase = slope * np.arange(m_s)[None, :] + offset + cfo_rate * frame_index + rf[:, None]
    if gain_db != 0.0 or np.any(phase != 0.0):
        values = values * (10.0 ** (gain_db / 20.0)) * np.exp(1j * phase)
    if cfg.csi_noise_std > 0:
        noise = rng.normal(0.0, cfg.csi_noise_std, size=(2, n_s, m_s))
        values = values + (noise[0] + 1j * noise[1]) / math.sqrt(2.0)
    values = np.where(frame.guard_mask[None, :], 0.0, values) if frame.guard_mask.any() else values
    out_frame = CsiFrame(values, frame.subcarrier_freqs_hz, frame.guard_mask)

    out_bsnr = bsnr
    if cfg.bsnr_quantize:
        db = bsnr.values if bsnr.in_db else 10.0 * np.log10(np.maximum(bsnr.values, 1e-300))
        out_bsnr = BeamSnrVector(np.maximum(quantize_db(db), 0.0), quantized=True, in_db=True, n_clamped=bsnr.n_clamped)
    return out_frame, out_bsnr


# ---------------------------------------------------------------------------
# Scene and beampattern synthesis
# ---------------------------------------------------------------------------


def default_subcarrier_grid(
    num_subcarriers: int = DEFAULT_NUM_SUBCARRIERS,
    num_guards: int = DEFAULT_NUM_GUARDS,
    carrier_hz: float = DEFAULT_CARRIER_HZ,
    spacing_hz: float = DEFAULT_SUBCARRIER_SPACING_HZ,
) -> tuple[np.ndarray, np.ndarray]:
    """Frequencies centred on the carrier, guards split between the band edges."""
    if num_guards >= num_subcarriers:
        raise ValueError("guards must leave at least one active subcarrier")
    k = np.arange(num_subcarriers) - (num_subcarriers - 1) / 2.0
    freqs = carrier_hz + k * spacing_hz
    mask = np.zeros(num_subcarriers, dtype=bool)
    lo = num_guards // 2
    hi = num_guards - lo
    mask[:lo] = True
    if hi:
        mask[num_subcarriers - hi:] = True
    return freqs, mask


def synthesize_beam_patterns(num_beams: int = DEFAULT_NUM_BEAMS, seed: int = 0) -> list[BeamPattern]:
    """Irregular directional TX sectors and a shared quasi-omni RX pattern on a 1 degree grid."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBEA4]))
    grid = np.deg2rad(np.arange(-180.0, 181.0, 1.0))
    centers = np.linspace(-np.pi / 2, np.pi / 2, num_beams) if num_beams > 1 else np.zeros(1)
    rx_ripple = gaussian_filter1d(rng.normal(size=grid.size), sigma=15.0, mode="wrap")
    rx_gain = np.exp(0.5 * rx_ripple / (np.std(rx_ripple) + 1e-12) * 0.3)
    patterns = []
    for m in range(num_beams):
        width = np.deg2rad(rng.uniform(12.0, 25.0))
        d = _wrap_angle(grid - centers[m])
        main = 10.0 * np.exp(-0.5 * (d / width) ** 2)
        side = 0.5 * np.exp(-0.5 * (_wrap_angle(d - rng.uniform(-np.pi, np.pi)) / (2 * width)) ** 2)
        ripple = gaussian_filter1d(rng.normal(size=grid.size), sigma=6.0, mode="wrap")
        ripple *= 0.4 / (np.std(ripple) + 1e-12)
        tx_gain = (main + side + 0.05) * np.exp(ripple)
        patterns.append(BeamPattern(grid, tx_gain, rx_gain, m))
    return patterns


@dataclass(frozen=True)
class SceneConfig:
    """Geometry of the synthetic room: TX at the origin, RX on the x axis."""

    link_distance_m: float = 2.0
    room_half_width_m: float = 2.5
    num_static_scatterers: int = 4
    num_class_scatterers: int = 3
    through_wall_scatterers: int = 1
    mmwave_wall_loss: float = 0.02
    jitter: JitterSpec = field(default_factory=JitterSpec)


def _bounce_path(tx, rx, point, reflectivity, phase, los_len) -> Path:
    d1 = np.asarray(point) - tx
    d2 = np.asarray(point) - rx
    length = float(np.hypot(*d1) + np.hypot(*d2))
    return Path(
        amplitude=reflectivity * los_len / length,
        phase_rad=phase % (2 * np.pi),
        delay_s=length / SPEED_OF_LIGHT,
        azimuth_tx_rad=float(np.arctan2(d1[1], d1[0])),
        azimuth_rx_rad=float(np.arctan2(d2[1], -d2[0])),
    )


def make_scenes(num_classes: int, seed: int = 0, cfg: SceneConfig = SceneConfig()) -> list[Scene]:
    """One scene per class: shared static environment plus class-specific scatterers.

    Static scatterers flagged as through-wall keep their sub-7 GHz path but are
    attenuated by ``mmwave_wall_loss`` at 60 GHz.
    """
    if num_classes < 1:
        raise ValueError("need at least one class")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5CE7E]))
    tx = np.array([0.0, 0.0])
    rx = np.array([cfg.link_distance_m, 0.0])
    los_len = cfg.link_distance_m
    los = Path(1.0, 0.0, los_len / SPEED_OF_LIGHT, 0.0, 0.0)

    def draw_point(lo_x, hi_x):
        y = rng.uniform(0.3, cfg.room_half_width_m) * rng.choice([-1.0, 1.0])
        return np.array([rng.uniform(lo_x, hi_x), y])

    static = []
    for k in range(cfg.num_static_scatterers):
        p = _bounce_path(tx, rx, draw_point(-1.0, los_len + 1.0), rng.uniform(0.3, 0.7), rng.uniform(0, 2 * np.pi), los_len)
        static.append((p, k < cfg.through_wall_scatterers))

    scenes = []
    for label in range(num_classes):
        dynamic = [
            _bounce_path(tx, rx, draw_point(0.2, los_len - 0.2), rng.uniform(0.4, 0.9), rng.uniform(0, 2 * np.pi), los_len)
            for _ in range(cfg.num_class_scatterers)
        ]
        paths = [los] + [p for p, _ in static] + dynamic
        mm = [los]
        for p, wall in static:
            mm.append(_scale_path(p, cfg.mmwave_wall_loss) if wall else p)
        mm += dynamic
        scenes.append(Scene(paths, label, cfg.jitter, mm))
    return scenes


def _scale_path(p: Path, factor: float) -> Path:
    return Path(p.amplitude * factor, p.phase_rad, p.delay_s, p.azimuth_tx_rad, p.azimuth_rx_rad)


def jitter_paths(paths: Sequence[Path], spec: JitterSpec, rng: np.random.Generator) -> list[Path]:
    n = len(paths)
    amp_f = np.maximum(1.0 + rng.normal(0.0, spec.amplitude_rel, n), 0.0)
    dphase = rng.normal(0.0, spec.phase_rad, n)
    ddelay = rng.normal(0.0, spec.delay_s, n)
    daz = rng.normal(0.0, spec.azimuth_rad, (2, n))
    return [
        Path(
            p.amplitude * amp_f[i],
            (p.phase_rad + dphase[i]) % (2 * np.pi),
            max(p.delay_s + ddelay[i], 0.0),
            p.azimuth_tx_rad + daz[0, i],
            p.azimuth_rx_rad + daz[1, i],
        )
        for i, p in enumerate(paths)
    ]


# ---------------------------------------------------------------------------
# Dataset generation and persistence
# ---------------------------------------------------------------------------


def _snapshot(scene, patterns, impairments, freqs, guard_mask, num_streams, seed, class_index, snap, cfo_rate):
    rng = np.random.default_rng(np.random.SeedSequence([seed, class_index, snap]))
    sub6 = jitter_paths(scene.paths, scene.jitter_spec, rng)
    # the 60 GHz paths share the scene geometry but get an independent perturbation
    mm = jitter_paths(scene.beam_paths, scene.jitter_spec, rng)
    values = np.stack([sample_cfr(sub6, freqs, s) for s in range(num_streams)])
    values[:, guard_mask] = 0.0
    frame = CsiFrame(values, freqs, guard_mask)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        bsnr = compute_beam_snr(mm, patterns, impairments.noise_var)
    imp_seed = int(rng.integers(0, 2**63))
    return apply_impairments(frame, bsnr, impairments, imp_seed, frame_index=snap, cfo_rate=cfo_rate)


def generate_dataset(
    scenes: Sequence[Scene],
    snapshots_per_class: int,
    impairments: ImpairmentConfig,
    labeled_fraction: float = 1.0,
    seed: int = 0,
    *,
    patterns: Optional[Sequence[BeamPattern]] = None,
    subcarrier_freqs_hz: Optional[np.ndarray] = None,
    guard_mask: Optional[np.ndarray] = None,
    num_streams: int = DEFAULT_NUM_STREAMS,
    num_classes: Optional[int] = None,
    split_tag: str = "train",
    config: Optional[dict] = None,
) -> Dataset:
    """Draw ``snapshots_per_class`` jittered, impaired snapshots from every scene.

    Only the first ``ceil(labeled_fraction * snapshots_per_class)`` samples of
    each class keep their label.  Every snapshot has its own seed derived from
    ``(seed, class, snapshot)``, so the result is a pure function of the inputs.
    """
    if not scenes:
        raise ValueError("need at least one scene")
    if snapshots_per_class < 1:
        raise ValueError("snapshots_per_class must be >= 1")
    if not 0 < labeled_fraction <= 1:
        raise ValueError(f"labeled_fraction must be in (0, 1], got {labeled_fraction}")
    if patterns is None:
        patterns = synthesize_beam_patterns(DEFAULT_NUM_BEAMS, seed)
    if subcarrier_freqs_hz is None:
        subcarrier_freqs_hz, default_mask = default_subcarrier_grid()
        guard_mask = default_mask if guard_mask is None else guard_mask
    freqs = np.asarray(subcarrier_freqs_hz, dtype=float)
    guard_mask = np.zeros(freqs.size, dtype=bool) if guard_mask is None else np.asarray(guard_mask, dtype=bool)
    n_cls = num_classes if num_classes is not None else max(s.class_label for s in scenes) + 1
    n_labeled = math.ceil(labeled_fraction * snapshots_per_class - 1e-9)

    csi, bsnr, labels = [], [], []
    quantized = in_db = False
    for ci, scene in enumerate(scenes):
        cfo_rng = np.random.default_rng(np.random.SeedSequence([seed, ci, 0xCF0]))
        cfo_std = impairments.cfo_drift_rad_per_frame_std
        cfo_rate = float(cfo_rng.normal(0.0, cfo_std)) if cfo_std > 0 else 0.0
        for snap in range(snapshots_per_class):
            frame, vec = _snapshot(scene, patterns, impairments, freqs, guard_mask, num_streams, seed, ci, snap, cfo_rate)
            csi.append(frame.values)
            bsnr.append(vec.values)
            quantized, in_db = vec.quantized, vec.in_db
            labels.append(scene.class_label if snap < n_labeled else -1)
    return Dataset(
        np.stack(csi), np.stack(bsnr), np.array(labels, dtype=np.int64), freqs, guard_mask,
        split_tag, int(seed), in_db, quantized, n_cls, dict(config or {}),
    )


def save_dataset(ds: Dataset, directory) -> FsPath:
    """Write the manifest plus flat little-endian arrays, sample-major."""
    out = FsPath(directory)
    try:
        out.mkdir(parents=True, exist_ok=True)
        csi = np.asarray(ds.csi)
        csi.real.astype("<f4").tofile(out / "csi_real.bin")
        csi.imag.astype("<f4").tofile(out / "csi_imag.bin")
        np.asarray(ds.bsnr).astype("<f4").tofile(out / "bsnr.bin")
        ds.labels.astype("<i4").tofile(out / "labels.bin")
        manifest = {
            "format": DATASET_FORMAT,
            "num_samples": len(ds),
            "csi_shape": list(csi.shape),
            "bsnr_shape": list(np.asarray(ds.bsnr).shape),
            "dtype": "<f4",
            "labels_dtype": "<i4",
            "label_list": sorted(int(x) for x in np.unique(ds.labels[ds.labels >= 0])),
            "num_classes": int(ds.num_classes),
            "seed": int(ds.seed),
            "split": ds.split_tag,
            "bsnr_in_db": bool(ds.bsnr_in_db),
            "bsnr_quantized": bool(ds.bsnr_quantized),
            "subcarrier_freqs_hz": [float(f) for f in ds.subcarrier_freqs_hz],
            "guard_mask": [bool(g) for g in ds.guard_mask],
            "config": ds.config,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc}") from exc
    return out


def load_dataset(directory) -> Dataset:
    src = FsPath(directory)
    manifest_path = src / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    m = json.loads(manifest_path.read_text())
    if m.get("format") != DATASET_FORMAT:
        raise ValueError(f"{src}: unsupported dataset format {m.get('format')!r}")
    csi_shape = tuple(m["csi_shape"])
    re = np.fromfile(src / "csi_real.bin", dtype="<f4").reshape(csi_shape)
    im = np.fromfile(src / "csi_imag.bin", dtype="<f4").reshape(csi_shape)
    bsnr = np.fromfile(src / "bsnr.bin", dtype="<f4").reshape(tuple(m["bsnr_shape"]))
    labels = np.fromfile(src / "labels.bin", dtype="<i4").astype(np.int64)
    return Dataset(
        (re + 1j * im).astype(np.complex64), bsnr, labels,
        np.asarray(m["subcarrier_freqs_hz"], dtype=float), np.asarray(m["guard_mask"], dtype=bool),
        m["split"], int(m["seed"]), bool(m["bsnr_in_db"]), bool(m["bsnr_quantized"]),
        int(m["num_classes"]), m.get("config", {}),
    )


def concat_datasets(datasets: Sequence[Dataset], *, drop_labels: bool = False) -> Dataset:
    """Stack datasets with matching shapes, e.g. to pool unlabeled data across tasks."""
    first = datasets[0]
    for ds in datasets[1:]:
        if ds.csi.shape[1:] != first.csi.shape[1:] or ds.bsnr.shape[1:] != first.bsnr.shape[1:]:
            raise ValueError("cannot pool datasets with different CSI / beam SNR shapes")
    labels = np.concatenate([ds.labels for ds in datasets])
    if drop_labels:
        labels = np.full_like(labels, -1)
    return Dataset(
        np.concatenate([ds.csi for ds in datasets]), np.concatenate([ds.bsnr for ds in datasets]), labels,
        first.subcarrier_freqs_hz, first.guard_mask, first.split_tag, first.seed, first.bsnr_in_db,
        first.bsnr_quantized, max(ds.num_classes for ds in datasets), first.config,
    )


def scene_to_dict(scene: Scene) -> dict:
    return {
        "class_label": scene.class_label,
        "jitter_spec": asdict(scene.jitter_spec),
        "paths": [asdict(p) for p in scene.paths],
    }
