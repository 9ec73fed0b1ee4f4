import numpy as np
import pytest

from app.fusion import (
    FEATURE_CHANNELS,
    N_FEATURE_CHANNELS,
    _zscore,
    epoch_stage_labels,
    frame_event_labels,
    fuse_features,
)
from app.models import EventKind, Hypnogram, RespiratoryEvent, SleepStage
from app.ppg_features import extract_ppg_features
from app.radar_dsp import Framing, extract_radar_features
from app.simulator import pulse_template


def _features(duration_s: float = 120.0, ppg_hop_s: float = 0.5):
    t_radar = np.arange(0, duration_s, 1 / 20.0)
    iq = np.exp(1j * 4 * np.pi * 2.0 * np.sin(2 * np.pi * 0.3 * t_radar) / 5.0)
    t_ppg = np.arange(0, duration_s, 1 / 50.0)
    ppg = pulse_template(np.mod(t_ppg * 1.5, 1.0))
    spo2 = np.full(int(duration_s), 97.0)
    radar = extract_radar_features(iq, 20.0, 0.005, Framing.for_duration(duration_s))
    ppg_features = extract_ppg_features(ppg, 50.0, spo2, 1.0, Framing.for_duration(duration_s, hop_s=ppg_hop_s))
    return radar, ppg_features


def test_fused_matrix_layout() -> None:
    radar, ppg = _features()

    fused = fuse_features(radar, ppg)

    assert N_FEATURE_CHANNELS == 46
    assert fused.matrix.shape == (240, 46)
    assert fused.matrix.dtype == np.float32
    assert fused.n_epochs == 4
    assert fused.frames_per_epoch == 60
    assert fused.channels[-2:] == ["radar_low_confidence", "ppg_masked"]
    assert np.isfinite(fused.matrix).all()


def test_mask_channels_are_appended() -> None:
    radar, ppg = _features()
    radar.low_confidence[:10] = True

    fused = fuse_features(radar, ppg)

    low_conf = fused.matrix[:, FEATURE_CHANNELS.index("radar_low_confidence")]
    assert low_conf[:10].tolist() == [1.0] * 10
    assert low_conf[10:].sum() == 0.0
    effort = fused.matrix[:10, FEATURE_CHANNELS.index("effort")]
    assert np.all(effort == 0.0)


def test_fusion_crops_to_whole_epochs() -> None:
    radar, ppg = _features(duration_s=100.0)

    fused = fuse_features(radar, ppg)

    assert fused.n_epochs == 3
    assert fused.matrix.shape[0] == 180


def test_fusion_rejects_mismatched_framing() -> None:
    radar, ppg = _features(ppg_hop_s=1.0)

    with pytest.raises(ValueError, match="different framings"):
        fuse_features(radar, ppg)


def test_fusion_rejects_record_shorter_than_epoch() -> None:
    radar, ppg = _features(duration_s=20.0)

    with pytest.raises(ValueError):
        fuse_features(radar, ppg)


def test_zscore_skips_missing_and_constant_columns() -> None:
    block = np.array(
        [
            [1.0, 5.0, np.nan],
            [2.0, 5.0, np.nan],
            [3.0, 5.0, 1.0],
            [np.nan, 5.0, np.nan],
        ]
    )

    out = _zscore(block)

    std = np.std([1.0, 2.0, 3.0])
    assert out[:3, 0] == pytest.approx([-1 / std, 0.0, 1 / std])
    assert out[3, 0] == 0.0
    assert np.all(out[:, 1] == 0.0)
    assert np.all(out[:, 2] == 0.0)


def test_frame_event_labels_use_frame_centres() -> None:
    framing = Framing.for_duration(30.0)
    events = [RespiratoryEvent(kind=EventKind.CENTRAL_APNEA, start_s=10.0, duration_s=5.0)]

    labels = frame_event_labels(events, framing)

    assert labels.shape == (60,)
    assert labels.sum() == 10
    assert np.flatnonzero(labels).tolist() == list(range(19, 29))


def test_epoch_stage_labels() -> None:
    hyp = Hypnogram(stages=[SleepStage.WAKE, SleepStage.N1, SleepStage.N2, SleepStage.N3, SleepStage.REM])

    assert epoch_stage_labels(hyp, 5).tolist() == [0, 1, 2, 3, 4]
    assert epoch_stage_labels(hyp, 3).tolist() == [0, 1, 2]
    with pytest.raises(ValueError):
        epoch_stage_labels(hyp, 6)
