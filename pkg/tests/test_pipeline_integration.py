import pytest

from app.models import EventKind, RespiratoryEvent, Settings, Severity, SleepStage
from app.pipeline import process_record
from app.simulator import generate_cohort, simulate_record
from app.stats import icc_a1

COHORT_MIX = {
    Severity.HEALTHY: 0.25,
    Severity.MILD: 0.25,
    Severity.MODERATE: 0.25,
    Severity.SEVERE: 0.25,
}


@pytest.fixture(scope="module")
def processed_cohort():
    """4 名被试、每人 3 h：(仿真记录, 处理结果)。"""
    settings = Settings()
    pairs = []
    for profile in generate_cohort(4, COHORT_MIX, 3.0, seed=11):
        bundle = simulate_record(profile, settings.physio, 3.0)
        pairs.append((bundle, process_record(bundle, settings)))
    return pairs


def _kind_pairs(truth: list[RespiratoryEvent], detected: list[RespiratoryEvent]) -> list[tuple[EventKind, EventKind]]:
    pairs = []
    for t in truth:
        best, best_overlap = None, 0.0
        for d in detected:
            overlap = min(t.end_s, d.end_s) - max(t.start_s, d.start_s)
            if overlap > best_overlap:
                best, best_overlap = d, overlap
        if best is not None and best_overlap >= 0.5 * min(t.duration_s, best.duration_s):
            pairs.append((t.kind, best.kind))
    return pairs


def test_cohort_covers_every_severity(processed_cohort) -> None:
    classes = sorted(bundle.profile.severity_class.value for bundle, _ in processed_cohort)

    assert classes == sorted(s.value for s in Severity)
    assert sum(len(bundle.truth_events) for bundle, _ in processed_cohort) > 0


def test_detected_events_match_planted_events(processed_cohort) -> None:
    n_truth = sum(r.match.n_truth for _, r in processed_cohort)
    n_detected = sum(r.match.n_detected for _, r in processed_cohort)
    matched = sum(r.match.matched for _, r in processed_cohort)

    assert matched / n_truth >= 0.9
    assert matched / n_detected >= 0.9


def test_oahi_agrees_with_planted_truth(processed_cohort) -> None:
    device = [r.report.oahi for _, r in processed_cohort]
    truth = [r.truth_report.oahi for _, r in processed_cohort]

    assert icc_a1(device, truth).value >= 0.9


def test_deep_sleep_recall(processed_cohort) -> None:
    hits = total = 0
    for _, r in processed_cohort:
        for t, p in zip(r.truth_hypnogram.stages, r.hypnogram.stages):
            if t == SleepStage.N3:
                total += 1
                hits += int(p == SleepStage.N3)

    assert total > 0
    assert hits / total >= 0.6


def test_event_kinds_follow_planted_kinds(processed_cohort) -> None:
    pairs = [pair for bundle, r in processed_cohort for pair in _kind_pairs(list(bundle.truth_events), r.events)]

    assert pairs
    assert sum(t == d for t, d in pairs) / len(pairs) >= 0.9
    for kind in EventKind:
        same_kind = [d for t, d in pairs if t == kind]
        if len(same_kind) >= 5:
            assert sum(d == kind for d in same_kind) / len(same_kind) >= 0.9
