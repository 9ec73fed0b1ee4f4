from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from app.models import Hypnogram, RespiratoryEvent
from app.ppg_features import PpgFeatureSeries
from app.radar_dsp import FeatureFrameSeries, Framing

logger = logging.getLogger(__name__)

DOPPLER_POOL_BINS = 4
N_DOPPLER_BANDS = 20
LOG_FLOOR = 1e-6
RATIO_CLIP = 3.0

RADAR_CHANNELS = (
    ["movement_log", "effort", "effort_ratio", "flow_ratio", "doppler_peak_hz"]
    + [f"doppler_band_{i:02d}" for i in range(N_DOPPLER_BANDS)]
)
PPG_CHANNELS = (
    ["pulse_rate_bpm", "prv_sdnn_ms", "prv_rmssd_ms", "lf_log", "hf_log", "lf_hf_log"]
    + [f"tf_band_{i:02d}" for i in range(10)]
    + ["spo2_mean_pct", "spo2_min_pct", "spo2_drop_pct"]
)
MASK_CHANNELS = ["radar_low_confidence", "ppg_masked"]
FEATURE_CHANNELS: list[str] = RADAR_CHANNELS + PPG_CHANNELS + MASK_CHANNELS
N_FEATURE_CHANNELS = len(FEATURE_CHANNELS)


@dataclass
class FusedFeatures:
    """逐帧模型输入：frames × channels，已按记录 z-score，掩码位置置 0。"""

    matrix: np.ndarray
    framing: Framing
    frames_per_epoch: int
    radar: FeatureFrameSeries
    ppg: PpgFeatureSeries

    @property
    def n_frames(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def n_epochs(self) -> int:
        return self.n_frames // self.frames_per_epoch

    @property
    def channels(self) -> list[str]:
        return list(FEATURE_CHANNELS)


def _log(values: np.ndarray) -> np.ndarray:
    return np.log10(np.maximum(np.nan_to_num(values, nan=0.0), 0.0) + LOG_FLOOR)


def _pooled_doppler(power: np.ndarray) -> np.ndarray:
    usable = DOPPLER_POOL_BINS * N_DOPPLER_BANDS
    pooled = power[:, :usable].reshape(power.shape[0], N_DOPPLER_BANDS, DOPPLER_POOL_BINS).sum(axis=2)
    return _log(pooled)


def _zscore(block: np.ndarray) -> np.ndarray:
    out = np.zeros_like(block, dtype=float)
    for col in range(block.shape[1]):
        values = block[:, col]
        finite = np.isfinite(values)
        if finite.sum() < 2:
            continue
        mean = values[finite].mean()
        std = values[finite].std()
        if std < 1e-9:
            continue
        out[finite, col] = (values[finite] - mean) / std
    return out


def fuse_features(
    radar: FeatureFrameSeries,
    ppg: PpgFeatureSeries,
    epoch_len_s: float = 30.0,
) -> FusedFeatures:
    if radar.framing.hop_s != ppg.framing.hop_s or radar.framing.frame_len_s != ppg.framing.frame_len_s:
        raise ValueError("radar and PPG features use different framings")
    fpe = radar.framing.frames_per_epoch(epoch_len_s)
    n_epochs = min(radar.n_frames, ppg.n_frames) // fpe
    if n_epochs == 0:
        raise ValueError("record shorter than one epoch")
    n = n_epochs * fpe
    radar = radar.crop(n)
    ppg = ppg.crop(n)

    radar_block = np.column_stack(
        [
            _log(radar.movement_power),
            radar.effort,
            np.clip(radar.effort_ratio, 0.0, RATIO_CLIP),
            np.clip(radar.flow_ratio, 0.0, RATIO_CLIP),
            radar.doppler_peak_hz,
            _pooled_doppler(radar.doppler),
        ]
    )
    radar_block[radar.low_confidence] = np.nan

    ppg_block = np.column_stack(
        [
            ppg.pulse_rate_bpm,
            ppg.prv_sdnn_ms,
            ppg.prv_rmssd_ms,
            np.where(ppg.freq_masked, np.nan, _log(ppg.lf_power)),
            np.where(ppg.freq_masked, np.nan, _log(ppg.hf_power)),
            np.log10(np.where(np.isfinite(ppg.lf_hf_ratio), ppg.lf_hf_ratio, np.nan) + LOG_FLOOR),
            np.where(ppg.freq_masked[:, None], np.nan, _log(ppg.tf_spectrum)),
            ppg.spo2.frame_mean_pct,
            ppg.spo2.frame_min_pct,
            ppg.spo2.frame_drop_pct,
        ]
    )
    ppg_masked = ppg.time_masked | ppg.signal_masked

    masks = np.column_stack([radar.low_confidence, ppg_masked]).astype(float)
    matrix = np.hstack([_zscore(radar_block), _zscore(ppg_block), masks])
    if matrix.shape[1] != N_FEATURE_CHANNELS:
        raise ValueError(f"fused matrix has {matrix.shape[1]} channels, expected {N_FEATURE_CHANNELS}")
    logger.debug("features_fused | frames=%d | epochs=%d", n, n_epochs)
    return FusedFeatures(
        matrix=matrix.astype(np.float32),
        framing=radar.framing,
        frames_per_epoch=fpe,
        radar=radar,
        ppg=ppg,
    )


def frame_event_labels(events: list[RespiratoryEvent], framing: Framing) -> np.ndarray:
    """帧中心落在事件区间内记 1。"""
    centers = framing.frame_centers()
    labels = np.zeros(framing.n_frames, dtype=np.float32)
    for ev in events:
        labels[(centers >= ev.start_s) & (centers < ev.end_s)] = 1.0
    return labels


def epoch_stage_labels(hyp: Hypnogram, n_epochs: int) -> np.ndarray:
    if hyp.n_epochs < n_epochs:
        raise ValueError(f"hypnogram has {hyp.n_epochs} epochs, features need {n_epochs}")
    return np.asarray(hyp.stage_indices()[:n_epochs], dtype=np.int64)
