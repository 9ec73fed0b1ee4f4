from __future__ import annotations

import json
import logging
import sqlite3
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError

from app.errors import DataError
from app.models import EventKind, Hypnogram, RespiratoryEvent, SleepStage, SubjectProfile
from app.simulator import RecordBundle

logger = logging.getLogger(__name__)

BUNDLE_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
CHANNEL_FILES = {
    "radar_iq": "radar_iq.f32",
    "ppg": "ppg.f32",
    "spo2": "spo2.f32",
}
HYPNOGRAM_FILE = "truth_hypnogram.csv"
EVENTS_FILE = "truth_events.csv"
EVENT_COLUMNS = ["start_s", "duration_s", "kind", "desat_pct"]


class RunLedger:
    """输出目录下的 state.db，记录每次命令执行的状态与指标。"""

    def __init__(self, db_path: str | Path) -> None:
        self.db_path = str(db_path)

    def _connect(self) -> sqlite3.Connection:
        conn = sqlite3.connect(self.db_path)
        conn.row_factory = sqlite3.Row
        return conn

    def init_db(self) -> None:
        Path(self.db_path).parent.mkdir(parents=True, exist_ok=True)
        with self._connect() as conn:
            conn.execute(
                """
                CREATE TABLE IF NOT EXISTS run_logs (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    run_at TEXT NOT NULL,
                    command TEXT NOT NULL,
                    status TEXT NOT NULL,
                    metrics_json TEXT NOT NULL,
                    error_message TEXT
                )
                """
            )

    def log_run(self, command: str, status: str, metrics: dict, error_message: str | None = None) -> None:
        with self._connect() as conn:
            conn.execute(
                """
                INSERT INTO run_logs(run_at, command, status, metrics_json, error_message)
                VALUES (?, ?, ?, ?, ?)
                """,
                (
                    datetime.now(timezone.utc).isoformat(),
                    command,
                    status,
                    json.dumps(metrics, ensure_ascii=False, sort_keys=True),
                    error_message,
                ),
            )

    def recent_runs(self, limit: int = 20) -> list[dict]:
        with self._connect() as conn:
            rows = conn.execute(
                "SELECT command, status, metrics_json, error_message, run_at FROM run_logs ORDER BY id DESC LIMIT ?",
                (limit,),
            ).fetchall()
        out = []
        for row in rows:
            try:
                metrics = json.loads(row["metrics_json"] or "{}")
            except json.JSONDecodeError:
                metrics = {}
            out.append(
                {
                    "command": row["command"],
                    "status": row["status"],
                    "metrics": metrics,
                    "error_message": row["error_message"],
                    "run_at": row["run_at"],
                }
            )
        return out


def write_json(path: str | Path, payload: BaseModel | dict) -> Path:
    """键排序、无时间戳，同样的输入得到逐字节相同的文件。"""
    data = payload.model_dump(mode="json") if isinstance(payload, BaseModel) else payload
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, ensure_ascii=False, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_json(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid JSON in {path}: {exc}") from exc


def events_to_frame(events: Sequence[RespiratoryEvent]) -> pd.DataFrame:
    return pd.DataFrame(
        [[ev.start_s, ev.duration_s, ev.kind.value, ev.desat_depth_pct] for ev in events],
        columns=EVENT_COLUMNS,
    )


def write_events_csv(path: str | Path, events: Sequence[RespiratoryEvent]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    events_to_frame(events).to_csv(path, index=False, float_format="%.3f")
    return path


def read_events_csv(path: str | Path) -> list[RespiratoryEvent]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    table = pd.read_csv(path)
    missing = set(EVENT_COLUMNS) - set(table.columns)
    if missing:
        raise DataError(f"{path}: missing columns {sorted(missing)}")
    try:
        return [
            RespiratoryEvent(
                kind=EventKind(row.kind),
                start_s=float(row.start_s),
                duration_s=float(row.duration_s),
                desat_depth_pct=float(row.desat_pct),
            )
            for row in table.itertuples(index=False)
        ]
    except (ValueError, ValidationError) as exc:
        raise DataError(f"{path}: invalid event row: {exc}") from exc


def write_hypnogram_csv(path: str | Path, hyp: Hypnogram) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"epoch_index": range(hyp.n_epochs), "stage": [s.value for s in hyp.stages]}).to_csv(path, index=False)
    return path


def read_hypnogram_csv(path: str | Path, epoch_len_s: float = 30.0) -> Hypnogram:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    table = pd.read_csv(path)
    if list(table.columns[:2]) != ["epoch_index", "stage"]:
        raise DataError(f"{path}: expected columns epoch_index,stage")
    if not np.array_equal(table["epoch_index"].to_numpy(), np.arange(len(table))):
        raise DataError(f"{path}: epoch_index must run 0..n-1")
    try:
        return Hypnogram(epoch_len_s=epoch_len_s, stages=[SleepStage(s) for s in table["stage"]])
    except (ValueError, ValidationError) as exc:
        raise DataError(f"{path}: invalid hypnogram: {exc}") from exc


def _write_f32(path: Path, values: np.ndarray) -> None:
    np.ascontiguousarray(values, dtype="<f4").tofile(path)


def _read_f32(path: Path) -> np.ndarray:
    if not path.exists():
        raise DataError(f"missing channel file: {path}")
    return np.fromfile(path, dtype="<f4").astype(float)


def write_bundle(bundle: RecordBundle, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    iq = np.asarray(bundle.radar_iq)
    # I/Q 交错存储：I0 Q0 I1 Q1 ...
    _write_f32(directory / CHANNEL_FILES["radar_iq"], np.column_stack([iq.real, iq.imag]).ravel())
    _write_f32(directory / CHANNEL_FILES["ppg"], bundle.ppg)
    _write_f32(directory / CHANNEL_FILES["spo2"], bundle.spo2)
    write_hypnogram_csv(directory / HYPNOGRAM_FILE, bundle.truth_hypnogram)
    write_events_csv(directory / EVENTS_FILE, bundle.truth_events)
    manifest = {
        "format_version": BUNDLE_FORMAT_VERSION,
        "profile": bundle.profile.model_dump(mode="json"),
        "rates_hz": {"radar": bundle.radar_fs, "ppg": bundle.ppg_fs, "spo2": bundle.spo2_fs},
        "samples": {"radar": int(iq.shape[0]), "ppg": int(len(bundle.ppg)), "spo2": int(len(bundle.spo2))},
        "durations_s": bundle.channel_durations(),
        "epoch_len_s": bundle.truth_hypnogram.epoch_len_s,
        "files": dict(CHANNEL_FILES, hypnogram=HYPNOGRAM_FILE, events=EVENTS_FILE),
    }
    write_json(directory / MANIFEST_NAME, manifest)
    logger.debug("bundle_written | %s | dir=%s", bundle.subject_id, directory)
    return directory


def read_bundle(directory: str | Path) -> RecordBundle:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"bundle directory not found: {directory}")
    manifest = read_json(directory / MANIFEST_NAME)
    if manifest.get("format_version") != BUNDLE_FORMAT_VERSION:
        raise DataError(f"{directory}: unsupported bundle format {manifest.get('format_version')}")
    try:
        profile = SubjectProfile.model_validate(manifest["profile"])
        rates = manifest["rates_hz"]
        samples = manifest["samples"]
        epoch_len_s = float(manifest.get("epoch_len_s", 30.0))
    except (KeyError, ValidationError) as exc:
        raise DataError(f"{directory}: invalid manifest: {exc}") from exc

    raw_iq = _read_f32(directory / CHANNEL_FILES["radar_iq"])
    if raw_iq.size % 2:
        raise DataError(f"{directory}: radar IQ file holds an odd number of floats")
    iq = raw_iq[0::2] + 1j * raw_iq[1::2]
    ppg = _read_f32(directory / CHANNEL_FILES["ppg"])
    spo2 = _read_f32(directory / CHANNEL_FILES["spo2"])
    for name, arr in (("radar", iq), ("ppg", ppg), ("spo2", spo2)):
        if arr.size != int(samples[name]):
            raise DataError(f"{directory}: {name} has {arr.size} samples, manifest says {samples[name]}")

    hyp = read_hypnogram_csv(directory / HYPNOGRAM_FILE, epoch_len_s)
    events = read_events_csv(directory / EVENTS_FILE)
    try:
        return RecordBundle(
            profile=profile,
            radar_iq=iq,
            radar_fs=float(rates["radar"]),
            ppg=ppg,
            ppg_fs=float(rates["ppg"]),
            spo2=spo2,
            spo2_fs=float(rates["spo2"]),
            truth_hypnogram=hyp,
            truth_events=events,
        )
    except ValueError as exc:
        raise DataError(f"{directory}: {exc}") from exc


def list_bundles(cohort_dir: str | Path) -> list[Path]:
    cohort_dir = Path(cohort_dir)
    if not cohort_dir.is_dir():
        raise DataError(f"cohort directory not found: {cohort_dir}")
    return sorted(p.parent for p in cohort_dir.glob(f"*/{MANIFEST_NAME}"))


def load_latest_report(out_dir: str | Path, name: str = "agreement_report.json") -> Optional[dict]:
    path = Path(out_dir) / name
    if not path.exists():
        return None
    return read_json(path)
