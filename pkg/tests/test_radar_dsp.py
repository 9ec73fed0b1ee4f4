import numpy as np
import pytest
from scipy import signal

from app.radar_dsp import (
    Framing,
    breathing_doppler,
    breathing_effort,
    doppler_frequencies,
    doppler_peak_hz,
    demodulate_phase,
    estimate_breath_period,
    extract_radar_features,
    local_ratio,
    low_confidence_samples,
    movement_power,
    select_range_bin,
)

FS = 20.0
WAVELENGTH_M = 0.005


def _time(duration_s: float = 120.0) -> np.ndarray:
    return np.arange(0, duration_s, 1 / FS)


def _to_iq(displacement_mm: np.ndarray) -> np.ndarray:
    return np.exp(1j * 4 * np.pi * displacement_mm / (WAVELENGTH_M * 1000))


def _rel_rms(actual: np.ndarray, expected: np.ndarray) -> float:
    return float(np.sqrt(np.mean((actual - expected) ** 2)) / np.sqrt(np.mean(expected**2)))


def test_framing_grid() -> None:
    framing = Framing.for_duration(120.0)

    assert framing.n_frames == 240
    assert framing.frames_per_epoch() == 60
    assert framing.frame_index(-5.0) == 0
    assert framing.frame_index(61.2) == 122
    assert framing.frame_index(1e6) == 239
    assert framing.frame_centers()[0] == pytest.approx(0.5)
    with pytest.raises(ValueError):
        Framing(hop_s=0.0)


@pytest.mark.parametrize("amplitude_mm", [2.0, 6.0])
def test_demodulation_recovers_displacement(amplitude_mm) -> None:
    displacement = amplitude_mm * np.cos(2 * np.pi * 0.25 * _time())

    recovered = demodulate_phase(_to_iq(displacement), WAVELENGTH_M)

    assert _rel_rms(recovered, signal.detrend(displacement)) < 0.01


def test_constant_iq_demodulates_to_zero() -> None:
    iq = np.full(2400, 0.6 + 0.8j)

    assert np.allclose(demodulate_phase(iq), 0.0, atol=1e-12)


def test_demodulation_ignores_global_phase_rotation() -> None:
    iq = _to_iq(2.0 * np.sin(2 * np.pi * 0.3 * _time()))

    rotated = iq * np.exp(1j * 2.1)

    assert np.allclose(demodulate_phase(rotated), demodulate_phase(iq), atol=1e-9)


def test_demodulate_rejects_empty_input() -> None:
    with pytest.raises(ValueError):
        demodulate_phase(np.array([], dtype=complex))


def test_select_range_bin_picks_moving_column() -> None:
    t = _time(60.0)
    still = np.full(t.size, 1.0 + 0j)
    moving = _to_iq(2.0 * np.sin(2 * np.pi * 0.3 * t))

    assert select_range_bin(np.column_stack([still, moving])) == 1
    with pytest.raises(ValueError):
        select_range_bin(moving)


def test_movement_burst_stands_out() -> None:
    t = _time()
    displacement = 2.0 * np.cos(2 * np.pi * 0.25 * t)
    burst = (t >= 60.0) & (t < 62.0)
    displacement[burst] += 0.3 * np.sin(2 * np.pi * 4.0 * t[burst])
    framing = Framing.for_duration(120.0)

    power = movement_power(displacement, FS, framing)

    assert power.shape == (240,)
    assert power[framing.frame_index(60.5)] >= 10 * np.median(power)


def test_effort_tracks_amplitude_and_collapses_in_central_window() -> None:
    t = _time()
    framing = Framing.for_duration(120.0)
    steady = 2.0 * np.cos(2 * np.pi * 0.25 * t)

    effort = breathing_effort(steady, FS, framing)

    interior = effort[framing.frame_index(20.0) : framing.frame_index(100.0)]
    assert np.all(np.abs(interior - 2.0) <= 0.2)

    central = steady.copy()
    central[(t >= 60.0) & (t < 90.0)] *= 0.02
    collapsed = breathing_effort(central, FS, framing)
    assert collapsed[framing.frame_index(75.0)] < 0.2


def test_effort_handles_awkward_record_lengths() -> None:
    # 2411 为素数，包络需要补零到快速 FFT 长度
    t = np.arange(2411) / FS
    framing = Framing.for_duration(t.size / FS)

    effort = breathing_effort(2.0 * np.cos(2 * np.pi * 0.25 * t), FS, framing)

    assert effort.shape == (framing.n_frames,)
    assert np.all(np.isfinite(effort))
    interior = effort[framing.frame_index(20.0) : framing.frame_index(100.0)]
    assert np.all(np.abs(interior - 2.0) <= 0.2)


def test_doppler_bins_cover_respiratory_range() -> None:
    freqs = doppler_frequencies()

    assert freqs[0] == 0.0
    assert freqs[-1] == pytest.approx(2.0)
    assert np.all(np.diff(freqs) <= 0.05 + 1e-12)


def test_doppler_peak_follows_breathing_rate() -> None:
    displacement = 2.0 * np.sin(2 * np.pi * 0.3 * _time())
    framing = Framing.for_duration(120.0)

    power, freqs = breathing_doppler(displacement, FS, framing)
    peaks = doppler_peak_hz(power, freqs)

    assert power.shape == (240, freqs.size)
    assert np.allclose(peaks[20:220], 0.3)


def test_breath_period_estimate() -> None:
    displacement = 2.0 * np.sin(2 * np.pi * 0.25 * _time())
    power, freqs = breathing_doppler(displacement, FS, Framing.for_duration(120.0))

    assert estimate_breath_period(power, freqs) == pytest.approx(4.0, abs=0.4)


def test_breath_period_without_breathing_raises() -> None:
    power, freqs = breathing_doppler(np.zeros(2400), FS, Framing.for_duration(120.0))

    with pytest.raises(ValueError, match="no respiratory signal"):
        estimate_breath_period(power, freqs)
    with pytest.raises(ValueError):
        estimate_breath_period(np.empty((0, freqs.size)), freqs)


def test_local_ratio_is_one_for_steady_series() -> None:
    assert np.allclose(local_ratio(np.full(500, 3.0), hop_s=0.5), 1.0)


def test_low_confidence_flags_weak_returns() -> None:
    iq = _to_iq(2.0 * np.sin(2 * np.pi * 0.3 * _time()))
    iq[1200:1400] *= 0.1

    assert low_confidence_samples(iq).sum() == 200

    features = extract_radar_features(iq, FS, WAVELENGTH_M)
    assert features.low_confidence[features.framing.frame_index(65.0)]
    assert not features.low_confidence[features.framing.frame_index(20.0)]


def test_extract_radar_features_table() -> None:
    iq = _to_iq(2.0 * np.sin(2 * np.pi * 0.3 * _time()))

    features = extract_radar_features(iq, FS, WAVELENGTH_M)

    assert features.n_frames == 240
    table = features.to_frame()
    assert len(table) == 240
    assert sum(col.startswith("doppler_") and col[8].isdigit() for col in table.columns) == features.doppler_freqs.size

    cropped = features.crop(100)
    assert cropped.n_frames == 100
    assert cropped.effort.shape == (100,)
