from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Optional, Sequence

from app.config import DEFAULT_SETTINGS_PATH, load_settings
from app.errors import ConfigError, DataError, EmptyInputError, SleepScreenError
from app.logging_utils import setup_logging
from app.models import AgreementReport, Settings, SubjectProfile
from app.network import SleepApneaNet, load_checkpoint, save_checkpoint, train
from app.pipeline import analyze_cohort, evaluate_cohort, process_record, training_record
from app.plots import write_plots
from app.publisher import REPORT_JSON, archive_report, write_tables
from app.simulator import generate_cohort, simulate_record
from app.storage import (
    RunLedger,
    list_bundles,
    read_bundle,
    read_json,
    write_bundle,
    write_events_csv,
    write_hypnogram_csv,
    write_json,
)

logger = logging.getLogger(__name__)

LEDGER_NAME = "state.db"


def _ledger(out_dir: Path) -> RunLedger:
    ledger = RunLedger(out_dir / LEDGER_NAME)
    ledger.init_db()
    return ledger


def _load_model(path: Optional[str]) -> Optional[SleepApneaNet]:
    if not path:
        return None
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {path}") from exc
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def cmd_simulate(settings: Settings, out_dir: Optional[str] = None) -> list[Path]:
    exp = settings.experiment
    out = Path(out_dir or exp.out_dir)
    profiles = generate_cohort(exp.cohort_size, exp.severity_mix, exp.duration_h, exp.seed)

    def work(profile: SubjectProfile) -> Path:
        bundle = simulate_record(profile, settings.physio, exp.duration_h)
        return write_bundle(bundle, out / profile.subject_id)

    with ThreadPoolExecutor(max_workers=max(1, min(exp.jobs, len(profiles)))) as executor:
        paths = list(executor.map(work, profiles))
    write_json(
        out / "cohort.json",
        {
            "seed": exp.seed,
            "duration_h": exp.duration_h,
            "subjects": [p.model_dump(mode="json") for p in profiles],
        },
    )
    logger.info("cohort_simulated | size=%d | out=%s", len(paths), out)
    return paths


def cmd_process(settings: Settings, bundle_dir: str, out_dir: Optional[str] = None) -> Path:
    bundle = read_bundle(bundle_dir)
    model = _load_model(settings.experiment.checkpoint if settings.experiment.mode == "model" else None)
    if settings.experiment.mode == "model" and model is None:
        raise ConfigError("model mode requires a checkpoint (--model PATH)")
    result = process_record(bundle, settings, model)
    out = Path(out_dir) if out_dir else Path(bundle_dir) / "processed"
    write_json(out / "report.json", result.report)
    write_hypnogram_csv(out / "hypnogram.csv", result.hypnogram)
    write_events_csv(out / "events.csv", result.events)
    return out


def cmd_evaluate(settings: Settings, cohort_dir: str, out_dir: Optional[str] = None) -> AgreementReport:
    exp = settings.experiment
    bundles = list_bundles(cohort_dir)
    if not bundles:
        raise EmptyInputError(f"no record bundles under {cohort_dir}")
    model = _load_model(exp.checkpoint) if exp.mode == "model" else None
    report = evaluate_cohort(bundles, settings, jobs=exp.jobs, model=model)
    out = Path(out_dir or exp.out_dir)
    archive_report(report, out)
    write_tables(report, out)
    if exp.plots:
        write_plots(report, out)
    return report


def cmd_report(report_path: str, out_dir: Optional[str] = None, plots: bool = True) -> list[Path]:
    path = Path(report_path)
    if path.is_dir():
        path = path / REPORT_JSON
    payload = read_json(path)
    try:
        report = AgreementReport.model_validate(payload)
    except ValueError as exc:
        raise DataError(f"invalid agreement report {path}: {exc}") from exc
    if report.n_subjects == 0 or not report.subjects:
        raise EmptyInputError(f"agreement report {path} holds no subjects")
    out = Path(out_dir) if out_dir else path.parent
    paths = write_tables(report, out)
    if plots:
        paths.extend(write_plots(report, out))
    return paths


def cmd_train(settings: Settings, cohort_dir: str, checkpoint_path: str) -> Path:
    bundles = list_bundles(cohort_dir)
    analyses, failures = analyze_cohort(bundles, settings, jobs=settings.experiment.jobs, with_oracle=False)
    if failures:
        logger.warning("train_records_skipped | count=%d | %s", len(failures), sorted(failures))
    result = train([training_record(a) for a in analyses], settings.train, settings.model)
    path = save_checkpoint(result.model, checkpoint_path)
    write_json(Path(checkpoint_path).with_suffix(".history.json"), {"history": result.history, "iterations": result.iterations})
    return path


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    experiment: dict[str, Any] = {
        "seed": getattr(args, "seed", None),
        "jobs": getattr(args, "jobs", None),
        "out_dir": getattr(args, "out", None),
        "k_folds": getattr(args, "k", None),
        "cohort_size": getattr(args, "cohort_size", None),
        "duration_h": getattr(args, "duration_h", None),
    }
    if getattr(args, "model", None):
        experiment["mode"] = "model"
        experiment["checkpoint"] = args.model
    elif getattr(args, "oracle", False):
        experiment["mode"] = "oracle"
    if getattr(args, "no_plots", False):
        experiment["plots"] = False
    return {"experiment": experiment, "log_level": getattr(args, "log_level", None)}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="radar-sleep-screen", description="Radar + PPG pediatric sleep apnea screening")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=DEFAULT_SETTINGS_PATH)
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int)
    common.add_argument("--out")
    common.add_argument("--log-level", dest="log_level")
    detector = common.add_mutually_exclusive_group()
    detector.add_argument("--oracle", action="store_true", help="rule-based detector (default)")
    detector.add_argument("--model", metavar="CHECKPOINT", help="trained model checkpoint")

    sub = parser.add_subparsers(dest="command", required=True)
    sim = sub.add_parser("simulate", parents=[common], help="write a simulated cohort of record bundles")
    sim.add_argument("--cohort-size", dest="cohort_size", type=int)
    sim.add_argument("--duration-h", dest="duration_h", type=float)

    proc = sub.add_parser("process", parents=[common], help="score one record bundle")
    proc.add_argument("bundle")

    ev = sub.add_parser("evaluate", parents=[common], help="cohort agreement against ground truth")
    ev.add_argument("cohort")
    ev.add_argument("--k", type=int)
    ev.add_argument("--no-plots", dest="no_plots", action="store_true")

    rep = sub.add_parser("report", parents=[common], help="figures and tables from an agreement report")
    rep.add_argument("report")
    rep.add_argument("--no-plots", dest="no_plots", action="store_true")

    tr = sub.add_parser("train", parents=[common], help="train a model on a simulated cohort")
    tr.add_argument("cohort")
    tr.add_argument("--checkpoint", required=True)
    return parser


def _ledger_dir(args: argparse.Namespace, settings: Settings) -> Path:
    if args.command == "process":
        return Path(args.out) if args.out else Path(args.bundle) / "processed"
    if args.command == "report":
        if args.out:
            return Path(args.out)
        path = Path(args.report)
        return path if path.is_dir() else path.parent
    if args.command == "train":
        return Path(args.checkpoint).parent
    return Path(settings.experiment.out_dir)


def run(args: argparse.Namespace, settings: Settings) -> dict[str, Any]:
    if args.command == "simulate":
        paths = cmd_simulate(settings, args.out)
        return {"bundles": len(paths)}
    if args.command == "process":
        out = cmd_process(settings, args.bundle, args.out)
        return {"out": str(out)}
    if args.command == "evaluate":
        report = cmd_evaluate(settings, args.cohort, args.out)
        return {"subjects": report.n_subjects, "failures": len(report.failures), "severity_agreement": report.severity_agreement}
    if args.command == "report":
        paths = cmd_report(args.report, args.out, plots=settings.experiment.plots)
        return {"files": len(paths)}
    if args.command == "train":
        path = cmd_train(settings, args.cohort, args.checkpoint)
        return {"checkpoint": str(path)}
    raise ConfigError(f"unknown command {args.command}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = load_settings(args.config, _overrides(args))
    except SleepScreenError as exc:
        setup_logging("INFO")
        logger.error("config_failed | %s", exc)
        return exc.exit_code

    out_dir = _ledger_dir(args, settings)
    setup_logging(settings.log_level, str(out_dir / "run.log"))
    ledger: Optional[RunLedger] = None
    try:
        ledger = _ledger(out_dir)
    except Exception as exc:  # noqa: BLE001
        logger.warning("ledger_unavailable | %s | %s", out_dir, exc)

    try:
        metrics = run(args, settings)
    except SleepScreenError as exc:
        logger.error("%s_failed | exit=%d | %s", args.command, exc.exit_code, exc)
        if ledger is not None:
            ledger.log_run(args.command, "failed", {}, str(exc))
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001
        logger.exception("%s_failed", args.command)
        if ledger is not None:
            ledger.log_run(args.command, "failed", {}, str(exc))
        return 1
    if ledger is not None:
        ledger.log_run(args.command, "success", metrics)
    logger.info("%s_done | %s", args.command, metrics)
    return 0


if __name__ == "__main__":
    sys.exit(main())
