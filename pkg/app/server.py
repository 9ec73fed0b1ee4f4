from __future__ import annotations

import argparse
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import uvicorn
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from app.config import load_settings
from app.errors import ConfigError, DataError, SleepScreenError
from app.logging_utils import setup_logging
from app.network import load_checkpoint
from app.pipeline import process_record
from app.publisher import REPORT_JSON
from app.storage import load_latest_report, read_bundle

app = FastAPI(title="Radar Sleep Screen", version="0.1.0")


class ProcessRequest(BaseModel):
    bundle_dir: str
    checkpoint: Optional[str] = None


def _http_error(exc: SleepScreenError) -> HTTPException:
    if isinstance(exc, ConfigError):
        return HTTPException(status_code=400, detail=str(exc))
    return HTTPException(status_code=422, detail=str(exc))


@app.get("/health")
def health() -> dict:
    return {
        "status": "ok",
        "time": datetime.now(timezone.utc).isoformat(),
    }


@app.post("/process")
def process(request: ProcessRequest) -> dict:
    try:
        settings = load_settings()
    except ConfigError as exc:
        raise _http_error(exc) from exc
    if not Path(request.bundle_dir).is_dir():
        raise HTTPException(status_code=404, detail=f"bundle not found: {request.bundle_dir}")
    model = None
    if request.checkpoint:
        if not Path(request.checkpoint).exists():
            raise HTTPException(status_code=404, detail=f"checkpoint not found: {request.checkpoint}")
        try:
            model = load_checkpoint(request.checkpoint)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
    try:
        result = process_record(read_bundle(request.bundle_dir), settings, model)
    except SleepScreenError as exc:
        raise _http_error(exc) from exc
    return {
        "report": result.report.model_dump(mode="json"),
        "events": len(result.events),
        "epochs": result.hypnogram.n_epochs,
    }


@app.get("/reports/latest")
def latest(out: Optional[str] = None) -> dict:
    out_dir = out
    if out_dir is None:
        try:
            out_dir = load_settings().experiment.out_dir
        except ConfigError as exc:
            raise _http_error(exc) from exc
    try:
        data = load_latest_report(out_dir)
    except DataError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc
    if data is None:
        raise HTTPException(status_code=404, detail="No agreement report found")
    return {
        "file": str(Path(out_dir) / REPORT_JSON),
        "report": data,
    }


def main() -> None:
    parser = argparse.ArgumentParser(description="Radar sleep screen HTTP service")
    parser.add_argument("--host")
    parser.add_argument("--port", type=int)
    args = parser.parse_args()

    settings = load_settings()
    setup_logging(settings.log_level)
    uvicorn.run(
        "app.server:app",
        host=args.host or settings.server_host,
        port=args.port or settings.server_port,
        reload=False,
    )


if __name__ == "__main__":
    main()
