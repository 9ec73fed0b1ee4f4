from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from app.models import (
    OBSTRUCTIVE_KINDS,
    SEVERITY_BANDS,
    EventKind,
    EventThresholds,
    Hypnogram,
    RespiratoryEvent,
    Severity,
    SleepReport,
    SleepStage,
    StageMetrics,
    StageScheme,
)
from app.ppg_features import Desaturation
from app.radar_dsp import Framing

logger = logging.getLogger(__name__)

DESAT_SEARCH_AFTER_S = 20.0
SLEEP_STAGES = (SleepStage.N1, SleepStage.N2, SleepStage.N3, SleepStage.REM)

SCHEME_LABELS: dict[StageScheme, tuple[str, ...]] = {
    StageScheme.WS: ("Wake", "Sleep"),
    StageScheme.WRLD: ("Wake", "REM", "Light", "Deep"),
    StageScheme.WRNN: ("Wake", "N1", "N2", "N3", "REM"),
}

# 输入词表取三种方案的并集，保证 collapse 可以重复施加
_COLLAPSE: dict[StageScheme, dict[str, str]] = {
    StageScheme.WRNN: {"Wake": "Wake", "N1": "N1", "N2": "N2", "N3": "N3", "REM": "REM"},
    StageScheme.WRLD: {
        "Wake": "Wake",
        "N1": "Light",
        "N2": "Light",
        "N3": "Deep",
        "REM": "REM",
        "Light": "Light",
        "Deep": "Deep",
    },
    StageScheme.WS: {
        "Wake": "Wake",
        "N1": "Sleep",
        "N2": "Sleep",
        "N3": "Sleep",
        "REM": "Sleep",
        "Light": "Sleep",
        "Deep": "Sleep",
        "Sleep": "Sleep",
    },
}


@dataclass(frozen=True)
class CandidateEvent:
    start_frame: int
    end_frame: int
    start_s: float
    end_s: float
    peak_prob: float

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


@dataclass(frozen=True)
class EventMatch:
    n_truth: int
    n_detected: int
    matched: int

    @property
    def recall(self) -> float:
        return self.matched / self.n_truth if self.n_truth else 1.0

    @property
    def precision(self) -> float:
        return self.matched / self.n_detected if self.n_detected else 1.0


def _hysteresis_runs(probs: np.ndarray, enter: float, exit: float) -> list[tuple[int, int]]:
    runs: list[tuple[int, int]] = []
    start: Optional[int] = None
    for i, p in enumerate(probs):
        if start is None:
            if p >= enter:
                start = i
        elif p < exit:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, len(probs)))
    return runs


def assemble_events(
    event_probs: np.ndarray,
    breath_period_s: float,
    thresholds: Optional[EventThresholds] = None,
    framing: Optional[Framing] = None,
) -> list[CandidateEvent]:
    """滞回阈值成段 -> 合并短间隔 -> 丢弃不足两个呼吸周期的段。

    帧 k 代表以 k*hop + frame_len/2 为中心、宽 hop 的时间片。
    """
    if breath_period_s <= 0:
        raise ValueError(f"breath_period_s must be positive, got {breath_period_s}")
    probs = np.asarray(event_probs, dtype=float)
    if probs.size == 0:
        return []
    thresholds = thresholds or EventThresholds()
    framing = framing or Framing(n_frames=probs.size)
    half = framing.hop_s / 2.0
    offset = framing.frame_len_s / 2.0

    def edges(a: int, b: int) -> tuple[float, float]:
        return a * framing.hop_s + offset - half, (b - 1) * framing.hop_s + offset + half

    merged: list[list[int]] = []
    for a, b in _hysteresis_runs(probs, thresholds.enter, thresholds.exit):
        if merged:
            prev_end = edges(*merged[-1])[1]
            if edges(a, b)[0] - prev_end < thresholds.merge_cycles * breath_period_s:
                merged[-1][1] = b
                continue
        merged.append([a, b])

    min_len = thresholds.min_cycles * breath_period_s
    out: list[CandidateEvent] = []
    for a, b in merged:
        start_s, end_s = edges(a, b)
        if end_s - start_s + 1e-9 < min_len:
            continue
        out.append(CandidateEvent(a, b, start_s, end_s, float(probs[a:b].max())))
    return out


def _core_halves(values: np.ndarray, a: int, b: int) -> tuple[float, float]:
    """事件窗口去掉首尾各 1/4 后，前后两半的中位数。"""
    n = b - a
    trim = n // 4
    core = np.asarray(values[a + trim : b - trim], dtype=float)
    if core.size == 0:
        core = np.asarray(values[a:b], dtype=float)
    core = np.nan_to_num(core, nan=1.0)
    if core.size == 1:
        return float(core[0]), float(core[0])
    mid = core.size // 2
    return float(np.median(core[:mid])), float(np.median(core[mid:]))


def classify_event(
    window: CandidateEvent,
    effort_ratio: np.ndarray,
    flow_ratio: np.ndarray,
    spo2_drop_pct: np.ndarray,
    framing: Framing,
    thresholds: Optional[EventThresholds] = None,
    desat_lag_s: float = 15.0,
) -> Optional[RespiratoryEvent]:
    thresholds = thresholds or EventThresholds()
    first, second = _core_halves(effort_ratio, window.start_frame, window.end_frame)
    effort_all = min(first, second)
    flow_first, flow_second = _core_halves(flow_ratio, window.start_frame, window.end_frame)
    flow_drop = 1.0 - 0.5 * (flow_first + flow_second)

    search_end = framing.frame_index(window.end_s + desat_lag_s + DESAT_SEARCH_AFTER_S) + 1
    drops = np.nan_to_num(spo2_drop_pct[window.start_frame : max(search_end, window.start_frame + 1)], nan=0.0)
    desat = float(drops.max()) if drops.size else 0.0

    central = thresholds.central_effort_ratio
    kind: Optional[EventKind] = None
    if first < central and second < central:
        kind = EventKind.CENTRAL_APNEA
    elif first < central and second >= thresholds.persisting_effort_ratio:
        kind = EventKind.MIXED_APNEA
    elif flow_drop >= thresholds.apnea_flow_drop and effort_all >= thresholds.persisting_effort_ratio:
        kind = EventKind.OBSTRUCTIVE_APNEA
    elif thresholds.hypopnea_flow_drop <= flow_drop < thresholds.apnea_flow_drop and desat >= thresholds.desat_pct:
        kind = EventKind.OBSTRUCTIVE_HYPOPNEA

    if kind is None:
        logger.info(
            "event_dropped | start=%.1f | dur=%.1f | effort=%.2f/%.2f | flow_drop=%.2f | desat=%.1f",
            window.start_s,
            window.duration_s,
            first,
            second,
            flow_drop,
            desat,
        )
        return None
    return RespiratoryEvent(kind=kind, start_s=window.start_s, duration_s=window.duration_s, desat_depth_pct=desat)


def _check_tst(tst_h: float) -> None:
    if not tst_h > 0:
        raise ValueError(f"total sleep time must be positive, got {tst_h}")


def compute_oahi(events: Sequence[RespiratoryEvent], tst_h: float) -> float:
    _check_tst(tst_h)
    return sum(1 for ev in events if ev.kind in OBSTRUCTIVE_KINDS) / tst_h


def compute_cai(events: Sequence[RespiratoryEvent], tst_h: float) -> float:
    _check_tst(tst_h)
    return sum(1 for ev in events if ev.kind == EventKind.CENTRAL_APNEA) / tst_h


def grade_severity(oahi: float) -> Severity:
    if math.isnan(oahi) or oahi < 0:
        raise ValueError(f"invalid OAHI {oahi}")
    for severity, (_, high) in SEVERITY_BANDS.items():
        if oahi <= high:
            return severity
    return Severity.SEVERE


def stage_metrics(hyp: Hypnogram, time_in_bed_h: Optional[float] = None) -> StageMetrics:
    tib_h = hyp.duration_s / 3600.0 if time_in_bed_h is None else time_in_bed_h
    if tib_h <= 0:
        raise ValueError("time in bed must be positive")
    sleep = hyp.is_sleep()
    n_sleep = sum(sleep)
    tst_h = n_sleep * hyp.epoch_len_s / 3600.0
    first_sleep = sleep.index(True) if n_sleep else hyp.n_epochs
    stage_pct = {
        stage.value: (100.0 * hyp.stages.count(stage) / n_sleep if n_sleep else 0.0) for stage in SLEEP_STAGES
    }
    return StageMetrics(
        tst_h=tst_h,
        time_in_bed_h=tib_h,
        sleep_efficiency_pct=min(100.0, 100.0 * tst_h / tib_h),
        sleep_latency_min=first_sleep * hyp.epoch_len_s / 60.0,
        stage_pct=stage_pct,
        wake_epochs=hyp.n_epochs - n_sleep,
    )


def collapse_stages(hyp: Union[Hypnogram, Sequence[str]], scheme: StageScheme) -> list[str]:
    labels = [s.value for s in hyp.stages] if isinstance(hyp, Hypnogram) else [getattr(s, "value", s) for s in hyp]
    table = _COLLAPSE[scheme]
    try:
        return [table[label] for label in labels]
    except KeyError as exc:
        raise ValueError(f"label {exc.args[0]!r} cannot be collapsed to {scheme.value}") from exc


def _overlap(a: RespiratoryEvent, b: RespiratoryEvent) -> float:
    return max(0.0, min(a.end_s, b.end_s) - max(a.start_s, b.start_s))


def match_events(
    truth: Sequence[RespiratoryEvent],
    detected: Sequence[RespiratoryEvent],
    min_overlap: float = 0.5,
) -> EventMatch:
    """一对一贪心匹配：交叠时长 ≥ min_overlap × 两者中较短的时长。"""
    pairs = []
    for i, t in enumerate(truth):
        for j, d in enumerate(detected):
            ov = _overlap(t, d)
            if ov > 0 and ov >= min_overlap * min(t.duration_s, d.duration_s):
                pairs.append((ov, i, j))
    pairs.sort(key=lambda x: (-x[0], x[1], x[2]))
    used_t: set[int] = set()
    used_d: set[int] = set()
    for _, i, j in pairs:
        if i in used_t or j in used_d:
            continue
        used_t.add(i)
        used_d.add(j)
    return EventMatch(n_truth=len(truth), n_detected=len(detected), matched=len(used_t))


def events_in_sleep(events: Sequence[RespiratoryEvent], hyp: Hypnogram) -> list[RespiratoryEvent]:
    kept = []
    for ev in events:
        epoch = int((ev.start_s + ev.duration_s / 2.0) // hyp.epoch_len_s)
        if epoch < hyp.n_epochs and hyp.stages[epoch] != SleepStage.WAKE:
            kept.append(ev)
    return kept


def detect_events(
    event_probs: np.ndarray,
    breath_period_s: float,
    effort_ratio: np.ndarray,
    flow_ratio: np.ndarray,
    spo2_drop_pct: np.ndarray,
    framing: Framing,
    thresholds: Optional[EventThresholds] = None,
    desat_lag_s: float = 15.0,
) -> list[RespiratoryEvent]:
    thresholds = thresholds or EventThresholds()
    events = []
    for window in assemble_events(event_probs, breath_period_s, thresholds, framing):
        event = classify_event(window, effort_ratio, flow_ratio, spo2_drop_pct, framing, thresholds, desat_lag_s)
        if event is not None:
            events.append(event)
    return events


def compute_odi(
    hyp: Hypnogram,
    tst_h: float,
    desaturations: Optional[Sequence[Desaturation]] = None,
    events: Sequence[RespiratoryEvent] = (),
) -> float:
    """有 SpO2 氧降列表时按睡眠期内氧降计数，否则按事件的 desat 深度计数。"""
    _check_tst(tst_h)
    if desaturations is None:
        starts = [ev.start_s for ev in events if ev.desat_depth_pct >= 3.0 - 1e-9]
    else:
        starts = [d.start_s for d in desaturations]
    sleep = hyp.is_sleep()
    count = 0
    for start in starts:
        epoch = int(start // hyp.epoch_len_s)
        if epoch < hyp.n_epochs and sleep[epoch]:
            count += 1
    return count / tst_h


def score_record(
    subject_id: str,
    source: str,
    hyp: Hypnogram,
    events: Sequence[RespiratoryEvent],
    time_in_bed_h: Optional[float] = None,
    desaturations: Optional[Sequence[Desaturation]] = None,
    spo2_mean_pct: Optional[float] = None,
    spo2_lowest_pct: Optional[float] = None,
    breath_period_s: Optional[float] = None,
) -> SleepReport:
    metrics = stage_metrics(hyp, time_in_bed_h)
    oahi = compute_oahi(events, metrics.tst_h)
    counts = {kind.value: 0 for kind in EventKind}
    for ev in events:
        counts[ev.kind.value] += 1
    return SleepReport(
        subject_id=subject_id,
        source=source,
        oahi=oahi,
        cai=compute_cai(events, metrics.tst_h),
        odi=compute_odi(hyp, metrics.tst_h, desaturations, events),
        tst_h=metrics.tst_h,
        time_in_bed_h=metrics.time_in_bed_h,
        sleep_efficiency_pct=metrics.sleep_efficiency_pct,
        sleep_latency_min=metrics.sleep_latency_min,
        stage_pct=metrics.stage_pct,
        wake_epochs=metrics.wake_epochs,
        severity=grade_severity(oahi),
        event_counts=counts,
        spo2_mean_pct=spo2_mean_pct,
        spo2_lowest_pct=spo2_lowest_pct,
        breath_period_s=breath_period_s,
    )


def report_quantity(report: SleepReport, name: str) -> float:
    """报告中的标量指标；light/deep/rem_pct 由 stage_pct 合并得到。"""
    pct = report.stage_pct
    if name == "light_pct":
        return pct.get("N1", 0.0) + pct.get("N2", 0.0)
    if name == "deep_pct":
        return pct.get("N3", 0.0)
    if name == "rem_pct":
        return pct.get("REM", 0.0)
    value = getattr(report, name)
    if value is None:
        raise ValueError(f"{name} missing from report {report.subject_id}")
    return float(value)
