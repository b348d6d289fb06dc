import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from mbsense.calib import (
    STD_FLOOR,
    CalibStats,
    augment_beam_snr,
    calibrate_phase_linear,
    csi_features,
    fit_calib_stats,
    linear_phase_residual,
    remove_guard_subcarriers,
    standardize,
    standardize_csi_batch,
)
from mbsense.channel import BeamSnrVector, CsiFrame, Dataset, default_subcarrier_grid


def _smooth_frame(seed=0, streams=3, m=242, guards=8):
    """Frame with a nonlinear but small phase profile and positive magnitudes."""
    rng = np.random.default_rng(seed)
    freqs, mask = default_subcarrier_grid(m, guards)
    k = np.arange(m)
    mag = 1.0 + 0.3 * rng.random((streams, 1)) * np.cos(2 * np.pi * k / 50.0)
    phase = 0.4 * np.sin(2 * np.pi * k / 80.0 + rng.uniform(0, 2 * np.pi, (streams, 1)))
    return CsiFrame(mag * np.exp(1j * phase), freqs, mask)


def test_guard_removal_keeps_active_subcarriers():
    frame = _smooth_frame()
    out = remove_guard_subcarriers(frame)
    assert out.values.shape == (3, 234)
    assert not out.guard_mask.any()
    np.testing.assert_array_equal(out.values, frame.values[:, ~frame.guard_mask])
    all_guard = CsiFrame(frame.values, frame.subcarrier_freqs_hz, np.ones(242, dtype=bool))
    with pytest.raises(ValueError):
        remove_guard_subcarriers(all_guard)


def test_calibration_removes_injected_linear_phase():
    frame = remove_guard_subcarriers(_smooth_frame())
    clean = calibrate_phase_linear(frame)
    k = np.arange(frame.values.shape[1])
    injected = CsiFrame(frame.values * np.exp(1j * (0.37 * k + 1.1)), frame.subcarrier_freqs_hz, frame.guard_mask)
    residual = np.angle(calibrate_phase_linear(injected).values * np.conj(clean.values))
    assert residual.std() < 1e-6


def test_calibration_is_idempotent_and_keeps_magnitude():
    frame = remove_guard_subcarriers(_smooth_frame(1))
    once = calibrate_phase_linear(frame)
    twice = calibrate_phase_linear(once)
    np.testing.assert_allclose(twice.values, once.values, atol=1e-12)
    np.testing.assert_allclose(np.abs(once.values), np.abs(frame.values), rtol=1e-12)


def test_residual_has_no_linear_component():
    rng = np.random.default_rng(3)
    values = np.exp(1j * np.cumsum(rng.normal(0, 0.05, (4, 100)), axis=1))
    r = linear_phase_residual(values)
    k = np.arange(100) - 49.5
    assert np.allclose(r.mean(axis=1), 0, atol=1e-12)
    assert np.allclose((r * k).sum(axis=1), 0, atol=1e-9)


def test_residual_needs_three_subcarriers():
    with pytest.raises(ValueError):
        linear_phase_residual(np.ones((1, 2), dtype=complex))


@settings(max_examples=40, deadline=None)
@given(st.floats(-0.5, 0.5), st.floats(-np.pi, np.pi), st.integers(0, 1000))
def test_any_linear_phase_is_removed(slope, offset, seed):
    frame = remove_guard_subcarriers(_smooth_frame(seed))
    k = np.arange(frame.values.shape[1])
    a = calibrate_phase_linear(frame).values
    b = calibrate_phase_linear(CsiFrame(frame.values * np.exp(1j * (slope * k + offset)), frame.subcarrier_freqs_hz, frame.guard_mask)).values
    assert np.angle(b * np.conj(a)).std() < 1e-6


def _dataset(n=20, streams=2, m=16, beams=5, seed=0):
    rng = np.random.default_rng(seed)
    freqs, mask = default_subcarrier_grid(m, 4)
    csi = (rng.normal(size=(n, streams, m)) + 1j * rng.normal(size=(n, streams, m))) * np.linspace(1, 2, m)
    csi[:, :, mask] = 0
    return Dataset(csi, rng.uniform(0, 30, (n, beams)), np.zeros(n), freqs, mask)


def test_fit_stats_matches_two_pass_oracle():
    ds = _dataset()
    st_ = fit_calib_stats(ds)
    feats = csi_features(ds.csi, ds.guard_mask)
    amp = feats[:, :2]
    n = amp.shape[0]
    mean = amp.sum(axis=0) / n
    var = ((amp - mean) ** 2).sum(axis=0) / n
    np.testing.assert_allclose(st_.amp_mean, mean, atol=1e-12)
    np.testing.assert_allclose(st_.amp_std, np.sqrt(var), atol=1e-12)
    assert st_.csi_shape == (2, 12)
    assert st_.bsnr_mean.shape == (5,)


def test_standardized_training_set_has_zero_mean_unit_std():
    ds = _dataset(n=50)
    st_ = fit_calib_stats(ds)
    z = standardize_csi_batch(csi_features(ds.csi, ds.guard_mask), st_)
    np.testing.assert_allclose(z.mean(axis=0), 0, atol=1e-10)
    np.testing.assert_allclose(z.std(axis=0), 1, atol=1e-10)


def test_constant_cell_hits_std_floor():
    ds = _dataset()
    ds.bsnr[:, 0] = 3.0
    st_ = fit_calib_stats(ds)
    assert st_.bsnr_std[0] == STD_FLOOR
    assert np.all(np.isfinite(standardize(BeamSnrVector(ds.bsnr[0]), st_)))


def test_standardize_single_sample_matches_batch():
    ds = _dataset()
    st_ = fit_calib_stats(ds)
    one = standardize(ds.frame(3), st_)
    batch = standardize_csi_batch(csi_features(ds.csi, ds.guard_mask), st_)
    np.testing.assert_allclose(one, batch[3], atol=1e-12)
    with pytest.raises(TypeError):
        standardize(np.zeros(3), st_)


def test_stats_json_roundtrip(tmp_path):
    st_ = fit_calib_stats(_dataset())
    st_.save(tmp_path / "s.json")
    back = CalibStats.load(tmp_path / "s.json")
    for name in CalibStats.__dataclass_fields__:
        np.testing.assert_array_equal(getattr(back, name), getattr(st_, name))


def test_fit_rejects_empty_dataset():
    ds = _dataset()
    with pytest.raises(ValueError):
        fit_calib_stats(ds.subset(np.zeros(0, dtype=int)))


def test_augmentation_scale_is_uniform_0p9_to_1p2():
    base = BeamSnrVector(np.full(4, 10.0), quantized=True, in_db=True)
    scales = np.array([augment_beam_snr(base, s).values[0] / 10.0 for s in range(2000)])
    assert scales.min() >= 0.9 and scales.max() <= 1.2
    assert sps.kstest(scales, sps.uniform(loc=0.9, scale=0.3).cdf).pvalue > 0.01
    out = augment_beam_snr(base, 0)
    assert not out.quantized
    assert np.allclose(out.values / base.values, out.values[0] / base.values[0])


def test_step_near_pi_is_ambiguous_under_unwrapping():
    # a neighbour step of 3.0 rad plus an injected slope of 0.3 crosses pi,
    # so unwrapping takes the other branch and the round trip cannot hold
    phase = np.zeros((1, 40))
    phase[0, 20:] = 3.0
    values = np.exp(1j * phase)
    k = np.arange(40)
    a = linear_phase_residual(values)
    b = linear_phase_residual(values * np.exp(1j * 0.3 * k))
    assert np.angle(np.exp(1j * (b - a))).std() > 0.1
    small = linear_phase_residual(values * np.exp(1j * 0.1 * k))
    assert np.angle(np.exp(1j * (small - a))).std() < 1e-9
