import pytest

from app.fusion import fuse_features
from app.models import EventKind, Hypnogram, PhysioConfig, RespiratoryEvent, Settings, Severity, SleepStage, SubjectProfile
from app.pipeline import ProcessedRecord, analyze_bundle, build_agreement_report
from app.ppg_features import extract_ppg_features
from app.radar_dsp import Framing, extract_radar_features
from app.scoring import match_events, score_record
from app.simulator import simulate_record

# 手工队列：6 条一小时记录，5/6 分级一致，36 个真值事件中 34 个被检出
TRUTH_COUNTS = [0, 2, 4, 6, 10, 14]
DEVICE_COUNTS = [1, 2, 3, 6, 11, 13]
PLANTED = [
    (Severity.HEALTHY, 0.5),
    (Severity.MILD, 2.0),
    (Severity.MILD, 4.0),
    (Severity.MODERATE, 6.0),
    (Severity.SEVERE, 10.5),
    (Severity.SEVERE, 14.0),
]


def make_profile(
    subject_id: str = "S0001",
    severity: Severity = Severity.MILD,
    target_oahi: float = 4.0,
    seed: int = 12345,
    age_years: float = 8.0,
) -> SubjectProfile:
    return SubjectProfile(
        subject_id=subject_id,
        age_years=age_years,
        severity_class=severity,
        target_oahi=target_oahi,
        seed=seed,
    )


def make_hypnogram(n_wake: int, n_epochs: int = 120) -> Hypnogram:
    cycle = [SleepStage.N1, SleepStage.N2, SleepStage.N2, SleepStage.N3, SleepStage.REM]
    stages = [SleepStage.WAKE] * n_wake + [cycle[i % len(cycle)] for i in range(n_epochs - n_wake)]
    return Hypnogram(stages=stages)


def make_apneas(starts: list[float]) -> list[RespiratoryEvent]:
    return [
        RespiratoryEvent(kind=EventKind.OBSTRUCTIVE_APNEA, start_s=s, duration_s=10.0, desat_depth_pct=4.0)
        for s in starts
    ]


def make_processed_records() -> list[ProcessedRecord]:
    records = []
    for i, (n_truth, n_device) in enumerate(zip(TRUTH_COUNTS, DEVICE_COUNTS)):
        severity, target = PLANTED[i]
        profile = make_profile(subject_id=f"S{i + 1:04d}", severity=severity, target_oahi=target, seed=i)
        hyp = make_hypnogram(2 + i)
        truth = make_apneas([300.0 + 60.0 * j for j in range(n_truth)])
        shared = min(n_truth, n_device)
        device = make_apneas(
            [300.0 + 60.0 * j for j in range(shared)] + [2000.0 + 60.0 * j for j in range(n_device - shared)]
        )
        records.append(
            ProcessedRecord(
                subject_id=profile.subject_id,
                profile=profile,
                report=score_record(profile.subject_id, "oracle", hyp, device, time_in_bed_h=1.0),
                truth_report=score_record(profile.subject_id, "truth", hyp, truth, time_in_bed_h=1.0),
                hypnogram=hyp,
                events=device,
                truth_hypnogram=hyp,
                match=match_events(truth, device),
                fold=i % 3,
            )
        )
    return records


@pytest.fixture(scope="session")
def small_report():
    return build_agreement_report(make_processed_records(), "oracle", seed=1, k_folds=3, failures={"S0099": "boom"})


@pytest.fixture(scope="session")
def mild_bundle():
    return simulate_record(make_profile(), PhysioConfig(), duration_h=2.0)


@pytest.fixture(scope="session")
def mild_fused(mild_bundle):
    framing = Framing.for_duration(mild_bundle.duration_s)
    radar = extract_radar_features(mild_bundle.radar_iq, mild_bundle.radar_fs, framing=framing)
    ppg = extract_ppg_features(mild_bundle.ppg, mild_bundle.ppg_fs, mild_bundle.spo2, mild_bundle.spo2_fs, framing)
    return fuse_features(radar, ppg)


@pytest.fixture(scope="session")
def mild_analysis(mild_bundle):
    return analyze_bundle(mild_bundle, Settings())
