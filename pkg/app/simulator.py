from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import uniform_filter1d

from app.models import (
    EventKind,
    Hypnogram,
    PhysioConfig,
    RespiratoryEvent,
    Severity,
    SleepStage,
    StageVitals,
    SubjectProfile,
)

logger = logging.getLogger(__name__)

EPOCH_LEN_S = 30.0

# 每个受试者按用途拆分独立随机流，改动一个通道不影响其余通道
STREAM_HYPNOGRAM = 1
STREAM_EVENTS = 2
STREAM_BREATHING = 3
STREAM_PULSE = 4
STREAM_MOVEMENT = 5
STREAM_RADAR_NOISE = 6
STREAM_PPG_NOISE = 7
STREAM_SPO2_NOISE = 8
STREAM_COHORT = 9

MEAN_DWELL_EPOCHS: dict[SleepStage, float] = {
    SleepStage.WAKE: 4.0,
    SleepStage.N1: 3.0,
    SleepStage.N2: 12.0,
    SleepStage.N3: 16.0,
    SleepStage.REM: 10.0,
}

# 离开当前阶段时的去向权重（不含自转移）
TRANSITION_WEIGHTS: dict[SleepStage, dict[SleepStage, float]] = {
    SleepStage.WAKE: {SleepStage.N1: 0.70, SleepStage.N2: 0.25, SleepStage.REM: 0.05},
    SleepStage.N1: {SleepStage.WAKE: 0.15, SleepStage.N2: 0.75, SleepStage.REM: 0.10},
    SleepStage.N2: {SleepStage.WAKE: 0.08, SleepStage.N1: 0.12, SleepStage.N3: 0.55, SleepStage.REM: 0.25},
    SleepStage.N3: {SleepStage.WAKE: 0.05, SleepStage.N1: 0.05, SleepStage.N2: 0.85, SleepStage.REM: 0.05},
    SleepStage.REM: {SleepStage.WAKE: 0.15, SleepStage.N1: 0.25, SleepStage.N2: 0.60},
}

SEVERITY_TARGET_RANGE: dict[Severity, tuple[float, float]] = {
    Severity.HEALTHY: (0.1, 0.8),
    Severity.MILD: (1.5, 4.5),
    Severity.MODERATE: (5.8, 9.2),
    Severity.SEVERE: (12.0, 22.0),
}

OBSTRUCTIVE_SHARE: dict[EventKind, float] = {
    EventKind.OBSTRUCTIVE_APNEA: 0.3,
    EventKind.MIXED_APNEA: 0.1,
}

# (基波幅度系数, 气流谐波系数)
EVENT_BREATH_FACTORS: dict[EventKind, tuple[float, float]] = {
    EventKind.OBSTRUCTIVE_APNEA: (0.8, 0.03),
    EventKind.OBSTRUCTIVE_HYPOPNEA: (0.85, 0.4),
    EventKind.CENTRAL_APNEA: (0.02, 0.02),
}

CENTRAL_RATE_PER_H = 0.4
EVENT_SLOT_S = 90.0
EVENT_MIN_GAP_S = 40.0
EVENT_RUN_MARGIN_S = 10.0
MIN_EVENT_S = 12.0
MOVEMENT_EVENT_GUARD_S = 10.0
AROUSAL_S = 10.0
PULSE_GRID_HZ = 10.0


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream]))


def _half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


@dataclass
class RecordBundle:
    profile: SubjectProfile
    radar_iq: np.ndarray
    radar_fs: float
    ppg: np.ndarray
    ppg_fs: float
    spo2: np.ndarray
    spo2_fs: float
    truth_hypnogram: Hypnogram
    truth_events: list[RespiratoryEvent] = field(default_factory=list)

    def __post_init__(self) -> None:
        for name, rate in (("radar", self.radar_fs), ("ppg", self.ppg_fs), ("spo2", self.spo2_fs)):
            if rate <= 0:
                raise ValueError(f"{name} sample rate must be positive")
        durations = self.channel_durations()
        if max(durations.values()) - min(durations.values()) > 1.0:
            raise ValueError(f"channel durations disagree: {durations}")
        if self.spo2.size and (np.nanmin(self.spo2) < 70.0 or np.nanmax(self.spo2) > 100.0):
            raise ValueError("SpO2 values must lie in [70, 100]")

    def channel_durations(self) -> dict[str, float]:
        return {
            "radar": len(self.radar_iq) / self.radar_fs,
            "ppg": len(self.ppg) / self.ppg_fs,
            "spo2": len(self.spo2) / self.spo2_fs,
        }

    @property
    def duration_s(self) -> float:
        return min(self.channel_durations().values())

    @property
    def subject_id(self) -> str:
        return self.profile.subject_id


def subject_vitals(cfg: PhysioConfig, age_years: Optional[float] = None) -> dict[SleepStage, StageVitals]:
    """按年龄调整各阶段生命体征：年龄越小心率、呼吸越快，胸壁幅度越小。"""
    if age_years is None or not cfg.age_adjust:
        return dict(cfg.stage_vitals)
    shift = 10.0 - age_years
    adjusted: dict[SleepStage, StageVitals] = {}
    for stage, vitals in cfg.stage_vitals.items():
        adjusted[stage] = vitals.model_copy(
            update={
                "pulse_rate_bpm": max(30.0, vitals.pulse_rate_bpm + 2.0 * shift),
                "resp_rate_bpm": max(6.0, vitals.resp_rate_bpm + 0.5 * shift),
                "chest_amp_mm": vitals.chest_amp_mm * (0.6 + 0.04 * age_years),
            }
        )
    return adjusted


def generate_hypnogram(
    profile: SubjectProfile,
    duration_h: float,
    epoch_len_s: float = EPOCH_LEN_S,
) -> Hypnogram:
    if not 1.0 <= duration_h <= 12.0:
        raise ValueError(f"duration_h must be within [1, 12], got {duration_h}")
    n_epochs = _half_up(duration_h * 3600.0 / epoch_len_s)
    rng = _rng(profile.seed, STREAM_HYPNOGRAM)

    onset = min(int(rng.integers(8, 31)), n_epochs - 1)
    stages: list[SleepStage] = [SleepStage.WAKE] * onset
    current = SleepStage.N1
    while len(stages) < n_epochs:
        stages.append(current)
        if rng.random() < 1.0 - 1.0 / MEAN_DWELL_EPOCHS[current]:
            continue
        # 前半夜偏深睡，后半夜偏 REM
        night_frac = len(stages) / n_epochs
        targets = list(TRANSITION_WEIGHTS[current])
        weights = np.array([TRANSITION_WEIGHTS[current][s] for s in targets], dtype=float)
        for idx, stage in enumerate(targets):
            if stage == SleepStage.N3:
                weights[idx] *= 1.5 - night_frac
            elif stage == SleepStage.REM:
                weights[idx] *= 0.5 + night_frac
        current = targets[int(rng.choice(len(targets), p=weights / weights.sum()))]
    return Hypnogram(epoch_len_s=epoch_len_s, stages=stages)


def sleep_runs(hyp: Hypnogram) -> list[tuple[int, int]]:
    """连续非 Wake 段，返回 [start, end) 的 epoch 下标。"""
    runs: list[tuple[int, int]] = []
    start: Optional[int] = None
    for idx, stage in enumerate(hyp.stages):
        if stage != SleepStage.WAKE and start is None:
            start = idx
        elif stage == SleepStage.WAKE and start is not None:
            runs.append((start, idx))
            start = None
    if start is not None:
        runs.append((start, hyp.n_epochs))
    return runs


def _obstructive_kinds(n_obs: int) -> list[EventKind]:
    n_oa = _half_up(OBSTRUCTIVE_SHARE[EventKind.OBSTRUCTIVE_APNEA] * n_obs)
    n_ma = _half_up(OBSTRUCTIVE_SHARE[EventKind.MIXED_APNEA] * n_obs)
    if n_obs >= 3:
        n_oa = max(1, n_oa)
        n_ma = max(1, n_ma)
    n_oh = n_obs - n_oa - n_ma
    return (
        [EventKind.OBSTRUCTIVE_APNEA] * n_oa
        + [EventKind.MIXED_APNEA] * n_ma
        + [EventKind.OBSTRUCTIVE_HYPOPNEA] * n_oh
    )


def _event_slots(hyp: Hypnogram) -> list[float]:
    slots: list[float] = []
    for start_epoch, end_epoch in sleep_runs(hyp):
        start_s = start_epoch * hyp.epoch_len_s + EVENT_RUN_MARGIN_S
        end_s = end_epoch * hyp.epoch_len_s - EVENT_RUN_MARGIN_S
        n_slots = int((end_s - start_s) // EVENT_SLOT_S)
        slots.extend(start_s + i * EVENT_SLOT_S for i in range(max(0, n_slots)))
    return slots


def plant_events(
    hyp: Hypnogram,
    profile: SubjectProfile,
    cfg: Optional[PhysioConfig] = None,
) -> list[RespiratoryEvent]:
    cfg = cfg or PhysioConfig()
    vitals = subject_vitals(cfg, profile.age_years)
    rng = _rng(profile.seed, STREAM_EVENTS)

    tst_h = sum(hyp.is_sleep()) * hyp.epoch_len_s / 3600.0
    if tst_h <= 0:
        raise ValueError("hypnogram contains no sleep epochs")

    n_obs = _half_up(profile.target_oahi * tst_h)
    n_central = min(int(rng.poisson(CENTRAL_RATE_PER_H * tst_h)), max(1, n_obs // 2))
    if profile.severity_class != Severity.HEALTHY:
        n_central = max(1, n_central)
    kinds = _obstructive_kinds(n_obs) + [EventKind.CENTRAL_APNEA] * n_central

    slots = _event_slots(hyp)
    if len(slots) < len(kinds):
        raise ValueError(
            f"TST {tst_h:.2f} h too short for {len(kinds)} events (only {len(slots)} slots)"
        )
    chosen = np.sort(rng.choice(len(slots), size=len(kinds), replace=False))
    order = rng.permutation(len(kinds))

    events: list[RespiratoryEvent] = []
    for slot_idx, kind_idx in zip(chosen, order):
        kind = kinds[int(kind_idx)]
        slot_start = slots[int(slot_idx)]
        stage = hyp.stages[min(int(slot_start // hyp.epoch_len_s), hyp.n_epochs - 1)]
        period = 60.0 / vitals[stage].resp_rate_bpm
        cycles = rng.uniform(8.0, 12.0) if kind == EventKind.MIXED_APNEA else rng.uniform(5.0, 9.0)
        duration = max(cycles * period, 2.0 * period, MIN_EVENT_S)
        duration = min(duration, EVENT_SLOT_S - EVENT_MIN_GAP_S)
        offset = rng.uniform(0.0, EVENT_SLOT_S - EVENT_MIN_GAP_S - duration)
        if kind == EventKind.OBSTRUCTIVE_HYPOPNEA:
            depth = rng.uniform(3.5, 6.0)
        elif kind == EventKind.CENTRAL_APNEA:
            depth = rng.uniform(3.0, 5.0) if rng.random() < 0.5 else 0.0
        else:
            depth = rng.uniform(3.0, 8.0)
        events.append(
            RespiratoryEvent(
                kind=kind,
                start_s=float(slot_start + offset),
                duration_s=float(duration),
                desat_depth_pct=float(depth),
            )
        )
    events.sort(key=lambda ev: ev.start_s)
    return events


def _epochs_to_samples(values: np.ndarray, epoch_len_s: float, fs: float, n: int, smooth_s: float) -> np.ndarray:
    idx = np.minimum((np.arange(n) / fs // epoch_len_s).astype(int), len(values) - 1)
    out = values[idx].astype(float)
    size = max(1, int(round(smooth_s * fs)))
    return uniform_filter1d(out, size=size, mode="nearest")


def _event_breath_factors(events: list[RespiratoryEvent], fs: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    fund = np.ones(n)
    harm = np.ones(n)
    for ev in events:
        i0 = min(n, int(round(ev.start_s * fs)))
        i1 = min(n, int(round(ev.end_s * fs)))
        if ev.kind == EventKind.MIXED_APNEA:
            mid = i0 + (i1 - i0) // 2
            fund[i0:mid], harm[i0:mid] = EVENT_BREATH_FACTORS[EventKind.CENTRAL_APNEA]
            fund[mid:i1], harm[mid:i1] = EVENT_BREATH_FACTORS[EventKind.OBSTRUCTIVE_APNEA]
        else:
            fund[i0:i1], harm[i0:i1] = EVENT_BREATH_FACTORS[ev.kind]
    size = max(1, int(round(fs)))
    return uniform_filter1d(fund, size, mode="nearest"), uniform_filter1d(harm, size, mode="nearest")


def _breathing_phase(
    hyp: Hypnogram,
    cfg: PhysioConfig,
    seed: int,
    vitals: dict[SleepStage, StageVitals],
    fs: float,
    n: int,
) -> tuple[np.ndarray, np.ndarray]:
    rng = _rng(seed, STREAM_BREATHING)
    rate_e = np.array(
        [vitals[s].resp_rate_bpm + rng.normal(0.0, vitals[s].resp_rate_sd_bpm) for s in hyp.stages]
    )
    rate_e = np.maximum(rate_e, 6.0)
    amp_e = np.array([vitals[s].chest_amp_mm for s in hyp.stages])
    n_knots = int(math.ceil(n / fs / 10.0)) + 2
    knots = rng.normal(0.0, cfg.breath_jitter_bpm, n_knots)
    t = np.arange(n) / fs
    jitter = np.interp(t, np.arange(n_knots) * 10.0, knots)
    rate = _epochs_to_samples(rate_e, hyp.epoch_len_s, fs, n, smooth_s=5.0) + jitter
    rate = np.maximum(rate, 6.0)
    phase = 2.0 * np.pi * np.cumsum(rate / 60.0 / fs) + rng.uniform(0.0, 2.0 * np.pi)
    amplitude = _epochs_to_samples(amp_e, hyp.epoch_len_s, fs, n, smooth_s=5.0)
    return phase, amplitude


def _pulse_phase(
    hyp: Hypnogram,
    events: list[RespiratoryEvent],
    cfg: PhysioConfig,
    seed: int,
    vitals: dict[SleepStage, StageVitals],
) -> tuple[np.ndarray, np.ndarray]:
    """在 10 Hz 内部网格上生成脉率轨迹并积分成相位（单位：周），雷达与 PPG 共用。"""
    rng = _rng(seed, STREAM_PULSE)
    n = int(math.ceil(hyp.duration_s * PULSE_GRID_HZ)) + 1
    t = np.arange(n) / PULSE_GRID_HZ

    mean_e = np.array([vitals[s].pulse_rate_bpm + rng.normal(0.0, vitals[s].pulse_rate_sd_bpm) for s in hyp.stages])
    lf_e = np.array([vitals[s].pulse_lf_bpm for s in hyp.stages])
    hf_e = np.array([vitals[s].pulse_hf_bpm for s in hyp.stages])
    base = _epochs_to_samples(mean_e, hyp.epoch_len_s, PULSE_GRID_HZ, n, smooth_s=10.0)
    lf_amp = _epochs_to_samples(lf_e, hyp.epoch_len_s, PULSE_GRID_HZ, n, smooth_s=10.0)
    hf_amp = _epochs_to_samples(hf_e, hyp.epoch_len_s, PULSE_GRID_HZ, n, smooth_s=10.0)

    n_radar = _half_up(hyp.duration_s * cfg.radar_rate_hz)
    resp_phase, _ = _breathing_phase(hyp, cfg, seed, vitals, cfg.radar_rate_hz, n_radar)
    resp_at_grid = np.interp(t, np.arange(n_radar) / cfg.radar_rate_hz, resp_phase)

    rate = base
    rate = rate + lf_amp * np.sin(2.0 * np.pi * 0.1 * t + rng.uniform(0.0, 2.0 * np.pi))
    rate = rate + hf_amp * np.sin(resp_at_grid)

    for ev in events:
        during = (t >= ev.start_s) & (t < ev.end_s)
        scale = 0.5 if ev.kind == EventKind.CENTRAL_APNEA else 1.0
        rate[during] -= scale * cfg.event_pulse_drop_bpm
        if ev.kind != EventKind.CENTRAL_APNEA:
            after = (t >= ev.end_s) & (t < ev.end_s + AROUSAL_S)
            tau = (t[after] - ev.end_s) / AROUSAL_S
            rate[after] += cfg.arousal_pulse_rise_bpm * np.sin(np.pi * tau)

    rate = np.clip(rate, 40.0, 220.0)
    phase = np.cumsum(rate / 60.0 / PULSE_GRID_HZ) + rng.uniform(0.0, 1.0)
    return t, phase


@dataclass(frozen=True)
class MovementBurst:
    start_s: float
    duration_s: float
    shift_mm: float
    jitter_mm: float
    jitter_hz: float


def _movement_bursts(
    hyp: Hypnogram,
    events: list[RespiratoryEvent],
    seed: int,
    vitals: dict[SleepStage, StageVitals],
) -> list[MovementBurst]:
    rng = _rng(seed, STREAM_MOVEMENT)
    bursts: list[MovementBurst] = []
    for epoch_idx, stage in enumerate(hyp.stages):
        lam = vitals[stage].movement_rate_per_h * hyp.epoch_len_s / 3600.0
        for _ in range(int(rng.poisson(lam))):
            burst = MovementBurst(
                start_s=epoch_idx * hyp.epoch_len_s + rng.uniform(0.0, hyp.epoch_len_s),
                duration_s=rng.uniform(1.0, 4.0),
                shift_mm=rng.uniform(-1.5, 1.5),
                jitter_mm=rng.uniform(0.1, 0.25),
                jitter_hz=rng.uniform(3.0, 5.0),
            )
            end_s = burst.start_s + burst.duration_s
            if end_s > hyp.duration_s:
                continue
            near_event = any(
                burst.start_s < ev.end_s + MOVEMENT_EVENT_GUARD_S and end_s > ev.start_s - MOVEMENT_EVENT_GUARD_S
                for ev in events
            )
            if not near_event:
                bursts.append(burst)
    return bursts


def synthesize_displacement(
    hyp: Hypnogram,
    events: list[RespiratoryEvent],
    cfg: PhysioConfig,
    seed: int,
    age_years: Optional[float] = None,
) -> np.ndarray:
    """胸壁位移 d(t)，单位 mm，采样率 cfg.radar_rate_hz。"""
    vitals = subject_vitals(cfg, age_years)
    fs = cfg.radar_rate_hz
    n = _half_up(hyp.duration_s * fs)
    t = np.arange(n) / fs

    phase, amplitude = _breathing_phase(hyp, cfg, seed, vitals, fs, n)
    fund, harm = _event_breath_factors(events, fs, n)
    flow = cfg.flow_harmonic_ratio * harm * np.sin(2.0 * phase + np.pi / 3.0)
    displacement = amplitude * fund * (np.sin(phase) + flow)

    if cfg.cardiac_amp_mm > 0:
        grid_t, pulse_phase = _pulse_phase(hyp, events, cfg, seed, vitals)
        displacement += cfg.cardiac_amp_mm * np.sin(2.0 * np.pi * np.interp(t, grid_t, pulse_phase))

    for burst in _movement_bursts(hyp, events, seed, vitals):
        i0 = int(round(burst.start_s * fs))
        i1 = min(n, int(round((burst.start_s + burst.duration_s) * fs)))
        local = (t[i0:i1] - burst.start_s) / burst.duration_s
        envelope = np.sin(np.pi * local)
        displacement[i0:i1] += burst.shift_mm * 0.5 * (1.0 - np.cos(2.0 * np.pi * local))
        displacement[i0:i1] += burst.jitter_mm * envelope * np.sin(2.0 * np.pi * burst.jitter_hz * (t[i0:i1] - burst.start_s))
    return displacement


def synthesize_radar(
    hyp: Hypnogram,
    events: list[RespiratoryEvent],
    cfg: PhysioConfig,
    seed: int,
    age_years: Optional[float] = None,
) -> np.ndarray:
    displacement = synthesize_displacement(hyp, events, cfg, seed, age_years=age_years)
    wavelength_mm = cfg.radar_wavelength_m * 1000.0
    iq = np.exp(1j * 4.0 * np.pi * displacement / wavelength_mm)
    if cfg.radar_snr_db is not None:
        rng = _rng(seed, STREAM_RADAR_NOISE)
        sigma = 10.0 ** (-cfg.radar_snr_db / 20.0) / math.sqrt(2.0)
        iq = iq + sigma * (rng.standard_normal(iq.size) + 1j * rng.standard_normal(iq.size))
    return iq


def pulse_template(u: np.ndarray) -> np.ndarray:
    """单个心动周期的 PPG 形状，u 为周期内相位 [0, 1)。"""
    return np.exp(-(((u - 0.15) / 0.06) ** 2)) + 0.15 * np.exp(-(((u - 0.42) / 0.1) ** 2))


def synthesize_spo2(
    events: list[RespiratoryEvent],
    cfg: PhysioConfig,
    duration_s: float,
    seed: int,
) -> np.ndarray:
    fs = cfg.spo2_rate_hz
    n = _half_up(duration_s * fs)
    t = np.arange(n) / fs
    dip = np.zeros(n)
    tau = cfg.desat_recovery_tau_s
    for ev in events:
        depth = ev.desat_depth_pct
        if depth <= 0:
            continue
        onset = ev.start_s + cfg.desat_lag_s
        i0 = max(0, int(math.floor(onset * fs)))
        i1 = min(n, int(math.ceil((onset + ev.duration_s + 10.0 * tau) * fs)) + 1)
        if i0 >= i1:
            continue
        s = t[i0:i1] - onset
        t_down = float(np.clip(0.5 * ev.duration_s, 4.0, 10.0))
        shape = np.where(
            s < 0,
            0.0,
            np.where(
                s < t_down,
                depth * s / t_down,
                np.where(s < ev.duration_s, depth, depth * np.exp(-(s - ev.duration_s) / tau)),
            ),
        )
        dip[i0:i1] = np.maximum(dip[i0:i1], shape)
    spo2 = cfg.spo2_baseline_pct - dip
    if cfg.spo2_noise_pct > 0:
        spo2 = spo2 + _rng(seed, STREAM_SPO2_NOISE).normal(0.0, cfg.spo2_noise_pct, n)
    return np.clip(spo2, 70.0, 100.0)


def synthesize_ppg(
    hyp: Hypnogram,
    events: list[RespiratoryEvent],
    cfg: PhysioConfig,
    seed: int,
    age_years: Optional[float] = None,
) -> tuple[np.ndarray, np.ndarray]:
    vitals = subject_vitals(cfg, age_years)
    fs = cfg.ppg_rate_hz
    n = _half_up(hyp.duration_s * fs)
    t = np.arange(n) / fs
    grid_t, pulse_phase = _pulse_phase(hyp, events, cfg, seed, vitals)
    cycles = np.interp(t, grid_t, pulse_phase)
    ppg = pulse_template(np.mod(cycles, 1.0))
    if cfg.ppg_noise_std > 0:
        ppg = ppg + _rng(seed, STREAM_PPG_NOISE).normal(0.0, cfg.ppg_noise_std, n)
    spo2 = synthesize_spo2(events, cfg, hyp.duration_s, seed)
    return ppg, spo2


def simulate_record(
    profile: SubjectProfile,
    cfg: Optional[PhysioConfig] = None,
    duration_h: float = 8.0,
) -> RecordBundle:
    cfg = cfg or PhysioConfig()
    hyp = generate_hypnogram(profile, duration_h)
    events = plant_events(hyp, profile, cfg)
    iq = synthesize_radar(hyp, events, cfg, profile.seed, age_years=profile.age_years)
    ppg, spo2 = synthesize_ppg(hyp, events, cfg, profile.seed, age_years=profile.age_years)
    bundle = RecordBundle(
        profile=profile,
        radar_iq=iq,
        radar_fs=cfg.radar_rate_hz,
        ppg=ppg,
        ppg_fs=cfg.ppg_rate_hz,
        spo2=spo2,
        spo2_fs=cfg.spo2_rate_hz,
        truth_hypnogram=hyp,
        truth_events=events,
    )
    logger.info(
        "record_simulated | %s | severity=%s | epochs=%d | events=%d",
        profile.subject_id,
        profile.severity_class.value,
        hyp.n_epochs,
        len(events),
    )
    return bundle


def allocate_severity(size: int, severity_mix: dict[Severity, float]) -> dict[Severity, int]:
    """最大余数法把 size 个受试者分到各严重程度。"""
    quotas = {cls: severity_mix.get(cls, 0.0) * size for cls in Severity}
    counts = {cls: int(math.floor(q)) for cls, q in quotas.items()}
    remaining = size - sum(counts.values())
    order = list(Severity)
    ranked = sorted(order, key=lambda cls: (-(quotas[cls] - counts[cls]), order.index(cls)))
    for cls in ranked[:remaining]:
        counts[cls] += 1
    return counts


def generate_cohort(
    size: int,
    severity_mix: dict[Severity, float],
    duration_h: float,
    seed: int,
) -> list[SubjectProfile]:
    if size < 1:
        raise ValueError("cohort size must be >= 1")
    if not 1.0 <= duration_h <= 12.0:
        raise ValueError(f"duration_h must be within [1, 12], got {duration_h}")
    counts = allocate_severity(size, severity_mix)
    children = np.random.SeedSequence(seed).spawn(size)
    rng = _rng(seed, STREAM_COHORT)

    profiles: list[SubjectProfile] = []
    for cls in Severity:
        low, high = SEVERITY_TARGET_RANGE[cls]
        for _ in range(counts[cls]):
            idx = len(profiles)
            profiles.append(
                SubjectProfile(
                    subject_id=f"S{idx + 1:04d}",
                    age_years=round(float(rng.uniform(1.0, 18.0)), 1),
                    severity_class=cls,
                    target_oahi=round(float(rng.uniform(low, high)), 3),
                    seed=int(children[idx].generate_state(1, dtype=np.uint64)[0]),
                )
            )
    logger.info("cohort_generated | size=%d | mix=%s", size, {k.value: v for k, v in counts.items()})
    return profiles
