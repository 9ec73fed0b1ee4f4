from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from app.classifier import rule_based_oracle
from app.errors import ConfigError, DataError, EmptyInputError
from app.fusion import N_FEATURE_CHANNELS, epoch_stage_labels, frame_event_labels, fuse_features
from app.models import (
    STAGE_ORDER,
    AgreementReport,
    CutoffPerformance,
    EventDetection,
    Hypnogram,
    QuantityAgreement,
    RespiratoryEvent,
    Settings,
    SleepReport,
    StageScheme,
    StagingPerformance,
    SubjectProfile,
    SubjectResult,
)
from app.network import ModelOutput, SleepApneaNet, TrainingRecord, predict, train
from app.ppg_features import Desaturation, extract_ppg_features
from app.radar_dsp import Framing, estimate_breath_period, extract_radar_features
from app.scoring import (
    SCHEME_LABELS,
    EventMatch,
    collapse_stages,
    detect_events,
    events_in_sleep,
    match_events,
    report_quantity,
    score_record,
)
from app.simulator import RecordBundle
from app.stats import bland_altman, cohen_kappa, confusion_matrix, confusion_metrics, grouped_kfold, icc_a1, roc_auc, sens_spec_ci
from app.storage import read_bundle

logger = logging.getLogger(__name__)

DIAGNOSTIC_CUTOFFS = (1.0, 5.0, 10.0)
AGREEMENT_QUANTITIES = ("oahi", "cai", "tst_h", "light_pct", "deep_pct", "rem_pct")


@dataclass
class RecordAnalysis:
    """一条记录的信号处理结果，只保留打分与训练需要的部分。"""

    profile: SubjectProfile
    truth_hypnogram: Hypnogram
    truth_events: list[RespiratoryEvent]
    time_in_bed_h: float
    framing: Framing
    frames_per_epoch: int
    matrix: np.ndarray
    effort_ratio: np.ndarray
    flow_ratio: np.ndarray
    spo2_drop_pct: np.ndarray
    desaturations: list[Desaturation]
    spo2_mean_pct: float
    spo2_lowest_pct: float
    breath_period_s: float
    oracle_output: Optional[ModelOutput] = None

    @property
    def subject_id(self) -> str:
        return self.profile.subject_id

    @property
    def n_epochs(self) -> int:
        return self.framing.n_frames // self.frames_per_epoch


@dataclass
class ProcessedRecord:
    subject_id: str
    profile: SubjectProfile
    report: SleepReport
    truth_report: SleepReport
    hypnogram: Hypnogram
    events: list[RespiratoryEvent]
    truth_hypnogram: Hypnogram
    match: EventMatch
    fold: int = 0


def analyze_bundle(bundle: RecordBundle, settings: Settings, with_oracle: bool = True) -> RecordAnalysis:
    framing = Framing.for_duration(bundle.duration_s)
    radar = extract_radar_features(bundle.radar_iq, bundle.radar_fs, settings.physio.radar_wavelength_m, framing)
    ppg = extract_ppg_features(bundle.ppg, bundle.ppg_fs, bundle.spo2, bundle.spo2_fs, framing)
    fused = fuse_features(radar, ppg, bundle.truth_hypnogram.epoch_len_s)
    try:
        period = estimate_breath_period(fused.radar.doppler, fused.radar.doppler_freqs)
    except ValueError as exc:
        raise DataError(f"{bundle.subject_id}: {exc}") from exc
    return RecordAnalysis(
        profile=bundle.profile,
        truth_hypnogram=bundle.truth_hypnogram,
        truth_events=list(bundle.truth_events),
        time_in_bed_h=bundle.duration_s / 3600.0,
        framing=fused.framing,
        frames_per_epoch=fused.frames_per_epoch,
        matrix=fused.matrix,
        effort_ratio=fused.radar.effort_ratio,
        flow_ratio=fused.radar.flow_ratio,
        spo2_drop_pct=fused.ppg.spo2.frame_drop_pct,
        desaturations=list(fused.ppg.spo2.desaturations),
        spo2_mean_pct=fused.ppg.spo2.mean_pct,
        spo2_lowest_pct=fused.ppg.spo2.lowest_pct,
        breath_period_s=period,
        oracle_output=rule_based_oracle(fused) if with_oracle else None,
    )


def _check_model_fits(model: SleepApneaNet, analysis: RecordAnalysis) -> None:
    cfg = model.cfg
    if cfg.n_channels != N_FEATURE_CHANNELS:
        raise ConfigError(f"model expects {cfg.n_channels} channels, features have {N_FEATURE_CHANNELS}")
    if cfg.frames_per_epoch != analysis.frames_per_epoch:
        raise ConfigError(f"model frames_per_epoch={cfg.frames_per_epoch}, features use {analysis.frames_per_epoch}")


def model_output(analysis: RecordAnalysis, model: Optional[SleepApneaNet]) -> ModelOutput:
    if model is None:
        if analysis.oracle_output is None:
            raise ValueError("oracle output not computed for this record")
        return analysis.oracle_output
    _check_model_fits(model, analysis)
    return predict(model, analysis.matrix)


def score_analysis(
    analysis: RecordAnalysis,
    output: ModelOutput,
    settings: Settings,
    source: str,
) -> ProcessedRecord:
    epoch_len = analysis.truth_hypnogram.epoch_len_s
    hyp = Hypnogram(epoch_len_s=epoch_len, stages=[STAGE_ORDER[i] for i in output.stage_argmax()])
    detected = detect_events(
        output.event_probs,
        analysis.breath_period_s,
        analysis.effort_ratio,
        analysis.flow_ratio,
        analysis.spo2_drop_pct,
        analysis.framing,
        settings.thresholds,
        settings.physio.desat_lag_s,
    )
    events = events_in_sleep(detected, hyp)
    try:
        report = score_record(
            analysis.subject_id,
            source,
            hyp,
            events,
            time_in_bed_h=analysis.time_in_bed_h,
            desaturations=analysis.desaturations,
            spo2_mean_pct=analysis.spo2_mean_pct,
            spo2_lowest_pct=analysis.spo2_lowest_pct,
            breath_period_s=analysis.breath_period_s,
        )
        truth_report = score_record(
            analysis.subject_id,
            "truth",
            analysis.truth_hypnogram,
            analysis.truth_events,
            time_in_bed_h=analysis.time_in_bed_h,
            desaturations=analysis.desaturations,
            spo2_mean_pct=analysis.spo2_mean_pct,
            spo2_lowest_pct=analysis.spo2_lowest_pct,
        )
    except ValueError as exc:
        raise DataError(f"{analysis.subject_id}: {exc}") from exc
    match = match_events(analysis.truth_events, events)
    logger.info(
        "record_done | %s | oahi=%.2f | truth_oahi=%.2f | severity=%s | events=%d | recall=%.2f | precision=%.2f",
        analysis.subject_id,
        report.oahi,
        truth_report.oahi,
        report.severity.value,
        len(events),
        match.recall,
        match.precision,
    )
    return ProcessedRecord(
        subject_id=analysis.subject_id,
        profile=analysis.profile,
        report=report,
        truth_report=truth_report,
        hypnogram=hyp,
        events=events,
        truth_hypnogram=analysis.truth_hypnogram,
        match=match,
    )


def process_record(bundle: RecordBundle, settings: Settings, model: Optional[SleepApneaNet] = None) -> ProcessedRecord:
    analysis = analyze_bundle(bundle, settings, with_oracle=model is None)
    return score_analysis(analysis, model_output(analysis, model), settings, "oracle" if model is None else "model")


def run_parallel(
    items: Sequence,
    fn: Callable,
    jobs: int,
    key: Callable[[object], str],
) -> tuple[dict[str, object], dict[str, str]]:
    """逐条执行，单条失败只记录错误，不中断整批。结果按 key 返回。"""
    results: dict[str, object] = {}
    errors: dict[str, str] = {}
    if not items:
        return results, errors
    with ThreadPoolExecutor(max_workers=max(1, min(jobs, len(items)))) as executor:
        future_map = {executor.submit(fn, item): key(item) for item in items}
        for future in as_completed(future_map):
            name = future_map[future]
            try:
                results[name] = future.result()
            except Exception as exc:  # noqa: BLE001
                errors[name] = str(exc)
                logger.warning("record_failed | %s | %s", name, exc)
    return results, errors


def _bundle_key(path: Path) -> str:
    return Path(path).name


def analyze_cohort(
    bundle_dirs: Sequence[Path],
    settings: Settings,
    jobs: int = 1,
    with_oracle: bool = True,
) -> tuple[list[RecordAnalysis], dict[str, str]]:
    if not bundle_dirs:
        raise EmptyInputError("no record bundles found")

    def work(path: Path) -> RecordAnalysis:
        return analyze_bundle(read_bundle(path), settings, with_oracle=with_oracle)

    results, errors = run_parallel(list(bundle_dirs), work, jobs, _bundle_key)
    if not results:
        raise DataError(f"all {len(bundle_dirs)} records failed: {errors}")
    analyses = sorted(results.values(), key=lambda a: a.subject_id)
    return analyses, errors


def training_record(analysis: RecordAnalysis) -> TrainingRecord:
    n_epochs = min(analysis.n_epochs, analysis.truth_hypnogram.n_epochs)
    n = n_epochs * analysis.frames_per_epoch
    framing = analysis.framing.crop(n)
    return TrainingRecord(
        subject_id=analysis.subject_id,
        features=analysis.matrix[:n],
        stage_labels=epoch_stage_labels(analysis.truth_hypnogram, n_epochs),
        event_labels=frame_event_labels(analysis.truth_events, framing),
    )


def fold_assignment(analyses: Sequence[RecordAnalysis], k: int, seed: int) -> dict[str, int]:
    ids = [a.subject_id for a in analyses]
    labels = [a.profile.severity_class.value for a in analyses]
    return dict(zip(ids, grouped_kfold(ids, labels, k=k, seed=seed)))


def train_fold_models(
    analyses: Sequence[RecordAnalysis],
    folds: dict[str, int],
    settings: Settings,
) -> dict[int, SleepApneaNet]:
    """每折用其余折的记录训练一个模型；训练串行执行，保证全局随机流确定。"""
    models: dict[int, SleepApneaNet] = {}
    records = {a.subject_id: training_record(a) for a in analyses}
    for fold in sorted(set(folds.values())):
        train_set = [records[sid] for sid, f in sorted(folds.items()) if f != fold and sid in records]
        if not train_set:
            raise DataError(f"fold {fold} has no training records")
        result = train(train_set, settings.train, settings.model)
        logger.info("fold_trained | fold=%d | train=%d | iterations=%d | final_loss=%.4f", fold, len(train_set), result.iterations, result.final_loss)
        models[fold] = result.model
    return models


def evaluate_cohort(
    bundle_dirs: Sequence[Path],
    settings: Settings,
    jobs: int = 1,
    model: Optional[SleepApneaNet] = None,
) -> AgreementReport:
    exp = settings.experiment
    use_model = exp.mode == "model" or model is not None
    analyses, failures = analyze_cohort(bundle_dirs, settings, jobs=jobs, with_oracle=not use_model)
    if len(analyses) < exp.k_folds:
        raise DataError(f"{len(analyses)} usable records cannot fill {exp.k_folds} folds")
    folds = fold_assignment(analyses, exp.k_folds, exp.seed)

    fold_models: dict[int, SleepApneaNet] = {}
    if use_model and model is None:
        fold_models = train_fold_models(analyses, folds, settings)

    def work(analysis: RecordAnalysis) -> ProcessedRecord:
        chosen = model if model is not None else fold_models.get(folds[analysis.subject_id])
        record = score_analysis(analysis, model_output(analysis, chosen), settings, "model" if use_model else "oracle")
        record.fold = folds[analysis.subject_id]
        return record

    results, errors = run_parallel(analyses, work, jobs, lambda a: a.subject_id)
    failures.update(errors)
    if not results:
        raise DataError(f"all records failed during scoring: {failures}")
    records = sorted(results.values(), key=lambda r: r.subject_id)
    return build_agreement_report(
        records, "model" if use_model else "oracle", exp.seed, exp.k_folds, failures, interval_method=exp.interval_method
    )


def _agreement(records: Sequence[ProcessedRecord], seed: int) -> list[QuantityAgreement]:
    out = []
    for name in AGREEMENT_QUANTITIES:
        device = [report_quantity(r.report, name) for r in records]
        reference = [report_quantity(r.truth_report, name) for r in records]
        try:
            out.append(
                QuantityAgreement(
                    quantity=name,
                    icc=icc_a1(device, reference, seed=seed),
                    bland_altman=bland_altman(device, reference),
                )
            )
        except ValueError as exc:
            logger.warning("agreement_skipped | %s | %s", name, exc)
    return out


def _diagnostic(records: Sequence[ProcessedRecord], interval_method: str = "wald") -> list[CutoffPerformance]:
    scores = np.array([r.report.oahi for r in records])
    truth = np.array([r.truth_report.oahi for r in records])
    out = []
    for cutoff in DIAGNOSTIC_CUTOFFS:
        pos = truth > cutoff
        called = scores > cutoff
        tp = int((pos & called).sum())
        fn = int((pos & ~called).sum())
        tn = int((~pos & ~called).sum())
        fp = int((~pos & called).sum())
        sens, spec = sens_spec_ci(tp, fn, tn, fp, interval_method)
        item = CutoffPerformance(cutoff=cutoff, tp=tp, fn=fn, tn=tn, fp=fp, sensitivity=sens, specificity=spec)
        if pos.any() and (~pos).any():
            roc = roc_auc(scores, pos.astype(int))
            item.auc = roc.auc
            item.roc_fpr = [float(x) for x in roc.fpr]
            item.roc_tpr = [float(x) for x in roc.tpr]
        out.append(item)
    return out


def _staging(records: Sequence[ProcessedRecord]) -> list[StagingPerformance]:
    out = []
    for scheme in StageScheme:
        truth_labels: list[str] = []
        pred_labels: list[str] = []
        for r in records:
            n = min(r.hypnogram.n_epochs, r.truth_hypnogram.n_epochs)
            truth_labels.extend(collapse_stages(r.truth_hypnogram.stages[:n], scheme))
            pred_labels.extend(collapse_stages(r.hypnogram.stages[:n], scheme))
        labels = list(SCHEME_LABELS[scheme])
        cm = confusion_matrix(truth_labels, pred_labels, labels)
        summary = confusion_metrics(cm, labels)
        out.append(
            StagingPerformance(
                scheme=scheme,
                labels=labels,
                confusion=summary.matrix.tolist(),
                accuracy=summary.accuracy,
                kappa=cohen_kappa(cm),
                recall=summary.recall,
                precision=summary.precision,
                macro_recall=summary.macro_recall,
                macro_precision=summary.macro_precision,
            )
        )
    return out


def _detection(match: EventMatch) -> EventDetection:
    return EventDetection(
        n_truth=match.n_truth,
        n_detected=match.n_detected,
        matched=match.matched,
        recall=match.recall,
        precision=match.precision,
    )


def build_agreement_report(
    records: Sequence[ProcessedRecord],
    source: str,
    seed: int,
    k_folds: int,
    failures: Optional[dict[str, str]] = None,
    interval_method: str = "wald",
) -> AgreementReport:
    if not records:
        raise EmptyInputError("no processed records to evaluate")
    pooled = EventMatch(
        n_truth=sum(r.match.n_truth for r in records),
        n_detected=sum(r.match.n_detected for r in records),
        matched=sum(r.match.matched for r in records),
    )
    subjects = [
        SubjectResult(
            subject_id=r.subject_id,
            fold=r.fold,
            planted_severity=r.profile.severity_class,
            truth=r.truth_report,
            predicted=r.report,
            events=_detection(r.match),
        )
        for r in records
    ]
    report = AgreementReport(
        source=source,
        seed=seed,
        k_folds=k_folds,
        n_subjects=len(records),
        agreement=_agreement(records, seed) if len(records) >= 2 else [],
        diagnostic=_diagnostic(records, interval_method),
        staging=_staging(records),
        events=_detection(pooled),
        severity_agreement=sum(r.report.severity == r.truth_report.severity for r in records),
        failures=dict(sorted((failures or {}).items())),
        subjects=subjects,
    )
    logger.info(
        "cohort_evaluated | subjects=%d | failures=%d | severity_agree=%d | event_recall=%.3f | event_precision=%.3f",
        report.n_subjects,
        len(report.failures),
        report.severity_agreement,
        pooled.recall,
        pooled.precision,
    )
    return report
