import numpy as np
import pytest

from app.ppg_features import (
    PulseBeats,
    detect_pulses,
    extract_ppg_features,
    freq_features,
    spo2_analysis,
    tf_spectrum,
    time_features,
)
from app.radar_dsp import Framing
from app.simulator import pulse_template

PPG_FS = 50.0


def _ppg(rate_bpm: float, duration_s: float = 120.0) -> np.ndarray:
    t = np.arange(0, duration_s, 1 / PPG_FS)
    return pulse_template(np.mod(t * rate_bpm / 60.0, 1.0))


def _beats(times: np.ndarray) -> PulseBeats:
    return PulseBeats(times_s=np.asarray(times, dtype=float), masked=np.zeros(0, dtype=bool), fs=PPG_FS)


def _modulated_beats(mod_hz: float, duration_s: float = 600.0, depth_s: float = 0.05) -> PulseBeats:
    times = [0.0]
    while times[-1] < duration_s:
        t = times[-1]
        times.append(t + 1.0 + depth_s * np.sin(2 * np.pi * mod_hz * t))
    return _beats(np.array(times))


@pytest.mark.parametrize("rate_bpm,interval_s", [(60.0, 1.0), (120.0, 0.5)])
def test_detect_pulses_interval(rate_bpm, interval_s) -> None:
    beats = detect_pulses(_ppg(rate_bpm), PPG_FS)

    intervals = np.diff(beats.times_s)
    assert beats.n_beats >= 0.95 * 120.0 * rate_bpm / 60.0
    assert np.median(intervals) == pytest.approx(interval_s, rel=0.02)
    assert not beats.masked.any()


def test_flat_ppg_is_masked() -> None:
    beats = detect_pulses(np.zeros(6000), PPG_FS)

    assert beats.n_beats == 0
    assert beats.masked.all()


def test_flat_segment_has_no_beats() -> None:
    ppg = _ppg(60.0)
    ppg[:1500] = 0.0

    beats = detect_pulses(ppg, PPG_FS)

    assert beats.masked[:1500].all()
    assert not beats.masked[2000:].any()
    assert beats.times_s.min() >= 30.0


def test_detect_pulses_rejects_low_rate() -> None:
    with pytest.raises(ValueError):
        detect_pulses(_ppg(60.0)[::3], 50.0 / 3)


def test_metronomic_beats_have_zero_variability() -> None:
    framing = Framing.for_duration(300.0)

    out = time_features(_beats(np.arange(0.0, 300.0, 1.0)), framing)

    mid = framing.frame_index(150.0)
    assert out["pulse_rate_bpm"][mid] == pytest.approx(60.0)
    assert out["prv_sdnn_ms"][mid] == 0.0
    assert out["prv_rmssd_ms"][mid] == 0.0
    assert not out["masked"][mid]


def test_alternating_intervals() -> None:
    framing = Framing.for_duration(300.0)
    times = np.concatenate([[0.0], np.cumsum(np.tile([0.9, 1.1], 150))])

    out = time_features(_beats(times), framing)

    mid = framing.frame_index(150.0)
    assert out["prv_rmssd_ms"][mid] == pytest.approx(200.0, rel=1e-6)
    assert out["prv_sdnn_ms"][mid] == pytest.approx(100.0, rel=0.05)
    assert out["pulse_rate_bpm"][mid] == pytest.approx(60.0, rel=0.01)


def test_too_few_beats_are_masked() -> None:
    framing = Framing.for_duration(60.0)

    out = time_features(_beats([10.0, 11.0]), framing)

    assert out["masked"].all()
    assert np.isnan(out["prv_sdnn_ms"]).all()


def test_implausible_rate_is_masked() -> None:
    framing = Framing.for_duration(60.0)

    out = time_features(_beats(np.arange(0.0, 60.0, 0.2)), framing)

    assert out["masked"].all()
    assert np.isnan(out["pulse_rate_bpm"]).all()


def test_low_frequency_modulation_raises_lf_hf() -> None:
    framing = Framing.for_duration(600.0)

    out = freq_features(_modulated_beats(0.1), framing)

    mid = framing.frame_index(300.0)
    assert out["lf_hf_ratio"][mid] > 5.0
    assert not out["masked"][mid]


def test_respiratory_modulation_lowers_lf_hf() -> None:
    framing = Framing.for_duration(600.0)

    out = freq_features(_modulated_beats(0.3), framing)

    assert out["lf_hf_ratio"][framing.frame_index(300.0)] < 0.2


def test_constant_intervals_have_undefined_ratio() -> None:
    framing = Framing.for_duration(600.0)

    out = freq_features(_beats(np.arange(0.0, 600.0, 1.0)), framing)

    mid = framing.frame_index(300.0)
    assert np.isnan(out["lf_hf_ratio"][mid])
    assert out["hf_power"][mid] == pytest.approx(0.0, abs=1e-6)


def test_tf_spectrum_bands() -> None:
    framing = Framing.for_duration(600.0)

    out = tf_spectrum(_modulated_beats(0.1), framing)

    assert out.shape == (framing.n_frames, 10)
    mid = framing.frame_index(300.0)
    assert int(np.argmax(out[mid])) == 2


def _spo2_with_dips(depth: float, offset: float = 0.0) -> np.ndarray:
    spo2 = np.full(3600, 97.0 + offset)
    for start in (300, 900, 1500, 2100, 2700):
        spo2[start : start + 30] -= depth
    return spo2


def test_odi_counts_desaturations() -> None:
    framing = Framing.for_duration(3600.0)

    analysis = spo2_analysis(_spo2_with_dips(5.0), 1.0, framing)

    assert analysis.odi_events_per_h == pytest.approx(5.0)
    assert [d.start_s for d in analysis.desaturations] == [300.0, 900.0, 1500.0, 2100.0, 2700.0]
    assert analysis.desaturations[0].duration_s == pytest.approx(30.0)
    assert analysis.desaturations[0].depth_pct == pytest.approx(5.0)
    assert analysis.lowest_pct == pytest.approx(92.0)
    assert analysis.frame_min_pct.shape == (7200,)


def test_odi_ignores_shallow_dips_and_constant_traces() -> None:
    framing = Framing.for_duration(3600.0)

    assert spo2_analysis(np.full(3600, 97.0), 1.0, framing).odi_events_per_h == 0.0
    assert spo2_analysis(_spo2_with_dips(2.9), 1.0, framing).odi_events_per_h == 0.0


def test_odi_is_invariant_to_baseline_offset() -> None:
    framing = Framing.for_duration(3600.0)

    shifted = spo2_analysis(_spo2_with_dips(5.0, offset=-2.0), 1.0, framing)

    assert shifted.odi_events_per_h == pytest.approx(5.0)


def test_spo2_analysis_rejects_empty_trace() -> None:
    with pytest.raises(ValueError):
        spo2_analysis(np.array([]), 1.0, Framing.for_duration(60.0))


def test_ppg_features_share_radar_frame_grid() -> None:
    framing = Framing.for_duration(120.0)

    features = extract_ppg_features(_ppg(90.0), PPG_FS, np.full(120, 97.0), 1.0, framing)

    assert features.n_frames == 240
    assert np.nanmedian(features.pulse_rate_bpm) == pytest.approx(90.0, rel=0.02)
    table = features.to_frame()
    assert len(table) == 240
    assert sum(col.startswith("tf_") for col in table.columns) == 10
    assert features.crop(100).spo2.frame_mean_pct.shape == (100,)
