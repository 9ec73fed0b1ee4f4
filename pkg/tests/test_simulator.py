import numpy as np
import pytest
from pydantic import ValidationError
from scipy import signal

from app.models import EventKind, Hypnogram, PhysioConfig, RespiratoryEvent, Severity, SleepStage, StageVitals
from app.ppg_features import spo2_analysis
from app.radar_dsp import Framing, demodulate_phase
from app.simulator import (
    RecordBundle,
    allocate_severity,
    generate_cohort,
    generate_hypnogram,
    plant_events,
    simulate_record,
    synthesize_displacement,
    synthesize_radar,
    synthesize_spo2,
)
from tests.conftest import make_profile


def test_hypnogram_length_and_determinism() -> None:
    profile = make_profile()

    first = generate_hypnogram(profile, 8.0)
    second = generate_hypnogram(profile, 8.0)

    assert first.n_epochs == 960
    assert first.stages == second.stages
    assert first.stages[0] == SleepStage.WAKE


@pytest.mark.parametrize("duration_h", [0.0, -1.0, 0.5, 13.0])
def test_hypnogram_rejects_out_of_range_duration(duration_h) -> None:
    with pytest.raises(ValueError):
        generate_hypnogram(make_profile(), duration_h)


def test_healthy_hypnograms_cover_every_stage() -> None:
    for seed in range(10):
        profile = make_profile(severity=Severity.HEALTHY, target_oahi=0.5, seed=seed)
        hyp = generate_hypnogram(profile, 8.0)
        assert set(hyp.stages) == set(SleepStage)


def _sleep_hours(hyp: Hypnogram) -> float:
    return sum(hyp.is_sleep()) * hyp.epoch_len_s / 3600.0


def test_planted_density_matches_target() -> None:
    profile = make_profile(severity=Severity.SEVERE, target_oahi=12.0, seed=99)
    hyp = generate_hypnogram(profile, 8.0)

    events = plant_events(hyp, profile)

    obstructive = [ev for ev in events if ev.kind != EventKind.CENTRAL_APNEA]
    achieved = len(obstructive) / _sleep_hours(hyp)
    assert achieved == pytest.approx(12.0, rel=0.15)
    assert {ev.kind for ev in events} == set(EventKind)
    assert len(obstructive) > len(events) - len(obstructive)


def test_planted_events_are_sorted_disjoint_and_in_sleep() -> None:
    profile = make_profile(severity=Severity.SEVERE, target_oahi=15.0, seed=7)
    hyp = generate_hypnogram(profile, 8.0)

    events = plant_events(hyp, profile)

    for prev, cur in zip(events, events[1:]):
        assert prev.end_s <= cur.start_s
    for ev in events:
        first = int(ev.start_s // hyp.epoch_len_s)
        last = int((ev.end_s - 1e-9) // hyp.epoch_len_s)
        assert all(hyp.stages[i] != SleepStage.WAKE for i in range(first, last + 1))
        if ev.kind == EventKind.OBSTRUCTIVE_HYPOPNEA:
            assert ev.desat_depth_pct >= 3.0
        assert ev.duration_s >= 2 * 60.0 / 30.0


def test_zero_target_plants_only_sporadic_central_events() -> None:
    profile = make_profile(severity=Severity.HEALTHY, target_oahi=0.0, seed=3)
    hyp = generate_hypnogram(profile, 8.0)

    events = plant_events(hyp, profile)

    assert len(events) <= 1
    assert all(ev.kind == EventKind.CENTRAL_APNEA for ev in events)


def test_plant_events_fails_without_room() -> None:
    hyp = Hypnogram(stages=[SleepStage.WAKE] * 10 + [SleepStage.N2] * 20)
    profile = make_profile(severity=Severity.SEVERE, target_oahi=60.0)

    with pytest.raises(ValueError):
        plant_events(hyp, profile)


def test_noiseless_radar_round_trip() -> None:
    profile = make_profile(seed=21)
    cfg = PhysioConfig()
    hyp = generate_hypnogram(profile, 1.0)
    events = plant_events(hyp, profile, cfg)

    truth = signal.detrend(synthesize_displacement(hyp, events, cfg, profile.seed, profile.age_years))
    recovered = demodulate_phase(synthesize_radar(hyp, events, cfg, profile.seed, profile.age_years), cfg.radar_wavelength_m)

    rel_rms = np.sqrt(np.mean((recovered - truth) ** 2)) / np.sqrt(np.mean(truth**2))
    assert rel_rms < 0.01


def test_radar_noise_is_added_at_requested_snr() -> None:
    profile = make_profile(seed=5)
    cfg = PhysioConfig(radar_snr_db=20.0)
    hyp = generate_hypnogram(profile, 1.0)

    iq = synthesize_radar(hyp, [], cfg, profile.seed)

    assert np.abs(iq).std() > 0.01
    assert np.abs(iq).mean() == pytest.approx(1.0, abs=0.05)


def test_spo2_dip_follows_event() -> None:
    cfg = PhysioConfig()
    event = RespiratoryEvent(kind=EventKind.OBSTRUCTIVE_HYPOPNEA, start_s=100.0, duration_s=20.0, desat_depth_pct=4.0)

    spo2 = synthesize_spo2([event], cfg, 600.0, seed=1)

    assert spo2.min() <= 93.5
    assert np.all(spo2[: int(100 + cfg.desat_lag_s)] == cfg.spo2_baseline_pct)
    analysis = spo2_analysis(spo2, cfg.spo2_rate_hz, Framing.for_duration(600.0))
    assert len(analysis.desaturations) == 1


def test_spo2_without_events_stays_at_baseline() -> None:
    spo2 = synthesize_spo2([], PhysioConfig(), 600.0, seed=1)

    assert np.all(np.abs(spo2 - 97.0) <= 1.0)


def test_simulate_record_is_deterministic() -> None:
    profile = make_profile(seed=42)

    first = simulate_record(profile, duration_h=1.0)
    second = simulate_record(profile, duration_h=1.0)

    assert np.array_equal(first.radar_iq, second.radar_iq)
    assert np.array_equal(first.ppg, second.ppg)
    assert np.array_equal(first.spo2, second.spo2)
    assert first.truth_events == second.truth_events
    durations = first.channel_durations()
    assert max(durations.values()) - min(durations.values()) <= 1.0
    assert first.duration_s == pytest.approx(3600.0)


def test_record_bundle_validates_channels() -> None:
    hyp = Hypnogram(stages=[SleepStage.N2] * 2)
    with pytest.raises(ValueError):
        RecordBundle(
            profile=make_profile(),
            radar_iq=np.ones(1200, dtype=complex),
            radar_fs=20.0,
            ppg=np.zeros(6000),
            ppg_fs=50.0,
            spo2=np.full(60, 97.0),
            spo2_fs=1.0,
            truth_hypnogram=hyp,
        )
    with pytest.raises(ValueError):
        RecordBundle(
            profile=make_profile(),
            radar_iq=np.ones(1200, dtype=complex),
            radar_fs=20.0,
            ppg=np.zeros(3000),
            ppg_fs=50.0,
            spo2=np.full(60, 60.0),
            spo2_fs=1.0,
            truth_hypnogram=hyp,
        )


def test_allocate_severity_largest_remainder() -> None:
    mix = {Severity.HEALTHY: 1 / 3, Severity.MILD: 1 / 3, Severity.MODERATE: 0.0, Severity.SEVERE: 1 / 3}

    counts = allocate_severity(24, mix)

    assert counts == {Severity.HEALTHY: 8, Severity.MILD: 8, Severity.MODERATE: 0, Severity.SEVERE: 8}
    assert sum(allocate_severity(7, mix).values()) == 7


def test_generate_cohort_profiles() -> None:
    mix = {Severity.HEALTHY: 0.25, Severity.MILD: 0.25, Severity.MODERATE: 0.25, Severity.SEVERE: 0.25}

    cohort = generate_cohort(8, mix, 8.0, seed=11)

    assert [p.subject_id for p in cohort] == [f"S{i:04d}" for i in range(1, 9)]
    assert [p.severity_class for p in cohort].count(Severity.MODERATE) == 2
    assert len({p.seed for p in cohort}) == 8
    assert cohort == generate_cohort(8, mix, 8.0, seed=11)
    assert cohort != generate_cohort(8, mix, 8.0, seed=12)


@pytest.mark.parametrize("field", ["chest_amp_mm", "resp_rate_bpm", "pulse_rate_bpm"])
def test_stage_vitals_require_positive_rates_and_amplitude(field) -> None:
    values = {"chest_amp_mm": 2.0, "resp_rate_bpm": 20.0, "pulse_rate_bpm": 80.0}
    values[field] = 0.0

    with pytest.raises(ValidationError):
        StageVitals(**values)
