from __future__ import annotations

import logging

import numpy as np
import pandas as pd
from scipy.ndimage import binary_dilation

from app.fusion import FusedFeatures
from app.models import STAGE_ORDER, SleepStage
from app.network import ModelOutput

logger = logging.getLogger(__name__)

MOVEMENT_MEDIAN_FACTOR = 20.0
MOVEMENT_FLOOR_MM2 = 1e-3
WAKE_MOVEMENT_FRACTION = 0.05
# 相对夜间脉率基线 (P5) 的升高量，单位 bpm
WAKE_PULSE_RISE = 24.0
DEEP_PULSE_RISE = 4.0
N2_PULSE_RISE = 12.0
REM_EFFORT_FRACTION = 0.85
# 深睡期迷走张力占优，LF/HF 偏低
DEEP_LF_HF_MAX = 0.15
# 深睡要求呼吸平稳
DEEP_EFFORT_SPREAD_MAX = 0.5
MOVEMENT_GUARD_FRAMES = 10
_EFFORT_EPS = 1e-6
PULSE_BASELINE_PERCENTILE = 5.0

STAGE_CONFIDENCE = 0.92

EVENT_FULL = 1.0
EVENT_DESAT_PARTIAL = 0.8
EVENT_PARTIAL = 0.3
EVENT_BACKGROUND = 0.05
EFFORT_CUTOFF = 0.5
FLOW_CUTOFF = 0.5
FLOW_PARTIAL_CUTOFF = 0.67
DESAT_CUTOFF_PCT = 3.0
DESAT_LOOKAHEAD_S = 15.0 + 25.0


def movement_frames(movement_power: np.ndarray) -> np.ndarray:
    power = np.asarray(movement_power, dtype=float)
    if power.size == 0:
        return np.zeros(0, dtype=bool)
    threshold = max(MOVEMENT_MEDIAN_FACTOR * float(np.median(power)), MOVEMENT_FLOOR_MM2)
    return power > threshold


def _epoch_mean(values: np.ndarray, n_epochs: int, fpe: int) -> np.ndarray:
    block = np.asarray(values[: n_epochs * fpe], dtype=float).reshape(n_epochs, fpe)
    with np.errstate(invalid="ignore"):
        counts = np.isfinite(block).sum(axis=1)
        sums = np.nansum(block, axis=1)
    return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


def _fill_nan(values: np.ndarray) -> np.ndarray:
    finite = np.isfinite(values)
    if not finite.any():
        return np.zeros_like(values)
    return np.where(finite, values, np.median(values[finite]))


def _epoch_median(values: np.ndarray, n_epochs: int, fpe: int) -> np.ndarray:
    block = np.asarray(values[: n_epochs * fpe], dtype=float).reshape(n_epochs, fpe)
    out = np.full(n_epochs, np.nan)
    for i, row in enumerate(block):
        finite = row[np.isfinite(row)]
        if finite.size:
            out[i] = float(np.median(finite))
    return out


def effort_variability(features: FusedFeatures) -> np.ndarray:
    """每个 epoch 内呼吸强度的相对离散度 (P90 - P10) / 中位数；体动附近与低置信帧不计入，
    有效帧不足半个 epoch 时记 0。"""
    n_epochs = features.n_epochs
    fpe = features.frames_per_epoch
    radar = features.radar
    guard = binary_dilation(movement_frames(radar.movement_power), iterations=MOVEMENT_GUARD_FRAMES)
    usable = ~(guard | radar.low_confidence) & np.isfinite(radar.effort)
    effort = np.asarray(radar.effort, dtype=float)
    spread = np.zeros(n_epochs)
    for i in range(n_epochs):
        sl = slice(i * fpe, (i + 1) * fpe)
        values = effort[sl][usable[sl]]
        if values.size < fpe // 2:
            continue
        p10, p50, p90 = np.percentile(values, [10.0, 50.0, 90.0])
        if p50 > _EFFORT_EPS:
            spread[i] = (p90 - p10) / p50
    return spread


def oracle_stages(features: FusedFeatures) -> list[SleepStage]:
    """按 epoch 的规则分期：体动 / 脉率升高判 Wake；脉率接近基线或 LF/HF 偏低、且呼吸平稳判 N3；
    其余按脉率升高量分 N2，再用呼吸强度区分 REM 与 N1。"""
    n_epochs = features.n_epochs
    fpe = features.frames_per_epoch
    moving = movement_frames(features.radar.movement_power)
    move_frac = _epoch_mean(moving.astype(float), n_epochs, fpe)
    pulse = _fill_nan(_epoch_mean(features.ppg.pulse_rate_bpm, n_epochs, fpe))
    effort = _fill_nan(_epoch_mean(features.radar.effort, n_epochs, fpe))
    lf_hf = np.nan_to_num(_epoch_median(features.ppg.lf_hf_ratio, n_epochs, fpe), nan=np.inf)
    steady = effort_variability(features) <= DEEP_EFFORT_SPREAD_MAX

    rise = pulse - np.percentile(pulse, PULSE_BASELINE_PERCENTILE)
    wake = (move_frac > WAKE_MOVEMENT_FRACTION) | (rise >= WAKE_PULSE_RISE)
    deep = ((rise < DEEP_PULSE_RISE) | ((rise < N2_PULSE_RISE) & (lf_hf < DEEP_LF_HF_MAX))) & steady
    sleep_effort = effort[~wake]
    effort_ref = float(np.median(sleep_effort)) if sleep_effort.size else float(np.median(effort))

    stages: list[SleepStage] = []
    for i in range(n_epochs):
        if wake[i]:
            stages.append(SleepStage.WAKE)
        elif deep[i]:
            stages.append(SleepStage.N3)
        elif rise[i] < N2_PULSE_RISE:
            stages.append(SleepStage.N2)
        elif effort[i] < REM_EFFORT_FRACTION * effort_ref:
            stages.append(SleepStage.REM)
        else:
            stages.append(SleepStage.N1)
    return stages


def _desat_ahead(frame_drop_pct: np.ndarray, hop_s: float) -> np.ndarray:
    """帧 i 之后 DESAT_LOOKAHEAD_S 内是否出现 ≥3% 的下降。"""
    width = max(1, int(round(DESAT_LOOKAHEAD_S / hop_s)))
    reversed_drop = pd.Series(np.nan_to_num(frame_drop_pct[::-1], nan=0.0))
    ahead = reversed_drop.rolling(width, min_periods=1).max().to_numpy()[::-1]
    return ahead >= DESAT_CUTOFF_PCT


def oracle_event_probs(features: FusedFeatures, stages: list[SleepStage]) -> np.ndarray:
    radar = features.radar
    effort_ratio = np.nan_to_num(radar.effort_ratio, nan=1.0)
    flow_ratio = np.nan_to_num(radar.flow_ratio, nan=1.0)
    desat = _desat_ahead(features.ppg.spo2.frame_drop_pct, features.framing.hop_s)

    probs = np.full(features.n_frames, EVENT_BACKGROUND)
    partial = flow_ratio < FLOW_PARTIAL_CUTOFF
    probs[partial & ~desat] = EVENT_PARTIAL
    probs[partial & desat] = EVENT_DESAT_PARTIAL
    probs[(flow_ratio < FLOW_CUTOFF) | (effort_ratio < EFFORT_CUTOFF)] = EVENT_FULL

    awake = np.repeat([s == SleepStage.WAKE for s in stages], features.frames_per_epoch)
    probs[awake | movement_frames(radar.movement_power)] = 0.0
    return probs


def rule_based_oracle(features: FusedFeatures) -> ModelOutput:
    stages = oracle_stages(features)
    stage_probs = np.full((len(stages), len(STAGE_ORDER)), (1.0 - STAGE_CONFIDENCE) / (len(STAGE_ORDER) - 1))
    for i, stage in enumerate(stages):
        stage_probs[i, STAGE_ORDER.index(stage)] = STAGE_CONFIDENCE
    event_probs = oracle_event_probs(features, stages)
    logger.debug(
        "oracle_done | epochs=%d | wake=%d | event_frames=%d",
        len(stages),
        sum(s == SleepStage.WAKE for s in stages),
        int((event_probs >= 0.6).sum()),
    )
    return ModelOutput(stage_probs=stage_probs, event_probs=event_probs)
