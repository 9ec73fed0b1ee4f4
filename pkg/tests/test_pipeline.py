import json

import numpy as np
import pytest

from app.errors import ConfigError, EmptyInputError
from app.models import ExperimentConfig, ModelConfig, Settings, Severity
from app.network import build_model
from app.pipeline import (
    analyze_cohort,
    build_agreement_report,
    evaluate_cohort,
    model_output,
    run_parallel,
    score_analysis,
    training_record,
)
from app.simulator import generate_cohort, simulate_record
from app.storage import list_bundles, write_bundle
from tests.conftest import make_processed_records


def test_run_parallel_collects_errors() -> None:
    def work(item: int) -> int:
        if item == 3:
            raise ValueError("bad record")
        return item * 10

    results, errors = run_parallel([1, 2, 3, 4], work, jobs=2, key=str)

    assert results == {"1": 10, "2": 20, "4": 40}
    assert errors == {"3": "bad record"}
    assert run_parallel([], work, jobs=2, key=str) == ({}, {})


def test_agreement_report_from_records(small_report) -> None:
    report = small_report

    assert report.n_subjects == 6
    assert report.severity_agreement == 5
    assert report.events.n_truth == 36
    assert report.events.matched == 34
    assert report.events.recall == pytest.approx(34 / 36)
    assert report.failures == {"S0099": "boom"}
    assert [s.subject_id for s in report.subjects] == [f"S{i:04d}" for i in range(1, 7)]


def test_agreement_report_statistics(small_report) -> None:
    quantities = [item.quantity for item in small_report.agreement]
    assert "oahi" in quantities
    assert "cai" not in quantities
    assert small_report.quantity("tst_h").icc.method == "exact"
    assert small_report.quantity("oahi").icc.value > 0.9

    by_cutoff = {item.cutoff: item for item in small_report.diagnostic}
    assert (by_cutoff[1.0].tp, by_cutoff[1.0].fp, by_cutoff[1.0].tn) == (5, 1, 0)
    assert (by_cutoff[5.0].tp, by_cutoff[5.0].tn) == (3, 3)
    assert by_cutoff[10.0].tp == 2
    assert by_cutoff[5.0].auc.value == pytest.approx(1.0)

    assert {item.scheme.value for item in small_report.staging} == {"WS", "WRLD", "WRNN"}
    assert all(item.accuracy == pytest.approx(1.0) for item in small_report.staging)


def test_agreement_report_rejects_empty_input() -> None:
    with pytest.raises(EmptyInputError):
        build_agreement_report([], "oracle", seed=1, k_folds=2)


def test_single_record_skips_agreement() -> None:
    report = build_agreement_report(make_processed_records()[:1], "oracle", seed=1, k_folds=2)

    assert report.agreement == []
    assert report.n_subjects == 1


def test_analyze_bundle(mild_analysis) -> None:
    assert mild_analysis.n_epochs == 240
    assert mild_analysis.matrix.shape == (240 * 60, 46)
    assert 1.5 < mild_analysis.breath_period_s < 5.0
    assert mild_analysis.oracle_output is not None
    assert mild_analysis.oracle_output.n_epochs == 240


def test_score_analysis_with_oracle(mild_analysis) -> None:
    record = score_analysis(mild_analysis, model_output(mild_analysis, None), Settings(), "oracle")

    assert record.report.source == "oracle"
    assert record.truth_report.source == "truth"
    assert record.truth_report.oahi == pytest.approx(4.0, abs=0.6)
    assert record.report.tst_h > 0
    assert record.hypnogram.n_epochs == 240
    assert record.match.n_truth == len(mild_analysis.truth_events)
    assert all(ev.start_s < ev.end_s for ev in record.events)


def test_model_output_checks_model_shape(mild_analysis) -> None:
    tiny = build_model(ModelConfig(n_channels=4, conv_widths=[4], kernel_size=3, pools=[2], hidden_size=3, frames_per_epoch=4))

    with pytest.raises(ConfigError):
        model_output(mild_analysis, tiny)


def test_model_output_runs_default_model(mild_analysis) -> None:
    out = model_output(mild_analysis, build_model(ModelConfig()))

    assert out.stage_probs.shape == (240, 5)
    assert out.event_probs.shape == (240 * 60,)


def test_training_record(mild_analysis) -> None:
    record = training_record(mild_analysis)

    assert record.features.shape == (240 * 60, 46)
    assert record.stage_labels.shape == (240,)
    assert record.event_labels.sum() > 0


def _write_cohort(directory, seed: int = 7) -> list:
    mix = {Severity.HEALTHY: 0.5, Severity.MILD: 0.5, Severity.MODERATE: 0.0, Severity.SEVERE: 0.0}
    for profile in generate_cohort(4, mix, 1.0, seed=seed):
        write_bundle(simulate_record(profile, duration_h=1.0), directory / profile.subject_id)
    return list_bundles(directory)


def _small_settings() -> Settings:
    mix = {Severity.HEALTHY: 0.5, Severity.MILD: 0.5, Severity.MODERATE: 0.0, Severity.SEVERE: 0.0}
    return Settings(experiment=ExperimentConfig(cohort_size=4, severity_mix=mix, duration_h=1.0, k_folds=2, seed=7))


def test_evaluate_cohort_is_independent_of_jobs(tmp_path) -> None:
    bundles = _write_cohort(tmp_path / "cohort")
    settings = _small_settings()

    serial = evaluate_cohort(bundles, settings, jobs=1)
    parallel = evaluate_cohort(bundles, settings, jobs=4)

    assert serial.n_subjects + len(serial.failures) == 4
    assert json.dumps(serial.model_dump(mode="json"), sort_keys=True) == json.dumps(
        parallel.model_dump(mode="json"), sort_keys=True
    )
    assert {s.fold for s in serial.subjects} <= {0, 1}


def test_analyze_cohort_reports_broken_bundles(tmp_path) -> None:
    bundles = _write_cohort(tmp_path / "cohort")
    (bundles[0] / "ppg.f32").unlink()

    analyses, failures = analyze_cohort(bundles, _small_settings(), jobs=2)

    assert len(analyses) == 3
    assert list(failures) == [bundles[0].name]
    assert all(np.isfinite(a.matrix).all() for a in analyses)


def test_analyze_cohort_rejects_empty_input() -> None:
    with pytest.raises(EmptyInputError):
        analyze_cohort([], Settings())


def test_wilson_interval_option() -> None:
    records = make_processed_records()
    wald = build_agreement_report(records, "oracle", seed=1, k_folds=3)
    wilson = build_agreement_report(records, "oracle", seed=1, k_folds=3, interval_method="wilson")

    wald_sens = {item.cutoff: item.sensitivity for item in wald.diagnostic}[5.0]
    wilson_sens = {item.cutoff: item.sensitivity for item in wilson.diagnostic}[5.0]
    assert wald_sens.value == wilson_sens.value == pytest.approx(1.0)
    assert wald_sens.ci_low == pytest.approx(1.0)
    assert wilson_sens.ci_low < 0.9
