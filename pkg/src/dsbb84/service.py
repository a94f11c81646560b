"""HTTP service wrapping the run pipeline.

All validation and computation happen server-side; clients submit the raw
config text and receive the full report, so a thin client only moves
bytes.  Protocol aborts are valid outcomes (HTTP 200 with status
"abort"); config and counts problems come back as 422 with the complete
violation list.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__
from .config import ConfigError, load_config, reference_config_text, \
    reference_counts_text
from .harness import run_replay, run_selftest, run_simulate, run_sweep

__all__ = ["app", "create_app"]


class SimulateRequest(BaseModel):
    config_ini: str
    seed: int = 0


class ReplayRequest(BaseModel):
    config_ini: str
    counts: dict
    seed: int = 0


class SweepRequest(BaseModel):
    config_ini: str
    parameter: str
    values: list[str]
    seed: int = 0
    jobs: int = Field(default=1, ge=1, le=64)


class KeyMaterial(BaseModel):
    basis: str
    length_bits: int
    key_hex: str
    bit_order: str = "lsb-first-per-byte"


class RunResponse(BaseModel):
    status: str
    report: dict
    metrics: dict
    keys: list[KeyMaterial]


class SweepResponse(BaseModel):
    parameter: str
    rows: list[dict]
    csv: str


class SelftestCheck(BaseModel):
    name: str
    ok: bool
    detail: str


class SelftestResponse(BaseModel):
    passed: bool
    checks: list[SelftestCheck]


def _load_or_422(config_ini: str):
    try:
        return load_config(config_ini)
    except ConfigError as exc:
        raise HTTPException(status_code=422,
                            detail={"errors": exc.problems}) from exc


def _run_response(rep, metrics, keys) -> RunResponse:
    material = [KeyMaterial(basis=b, length_bits=len(k),
                            key_hex=k.to_bytes().hex())
                for b, k in sorted(keys.items()) if len(k)]
    return RunResponse(status=rep["status"], report=rep, metrics=metrics,
                       keys=material)


def create_app() -> FastAPI:
    app = FastAPI(title="dsbb84", version=__version__)

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "version": __version__}

    @app.get("/v1/reference-config")
    def reference_config():
        return {"config_ini": reference_config_text()}

    @app.get("/v1/reference-counts")
    def reference_counts():
        import json
        return json.loads(reference_counts_text())

    @app.post("/v1/simulate", response_model=RunResponse)
    def simulate(req: SimulateRequest):
        cfg = _load_or_422(req.config_ini)
        rep, metrics, keys = run_simulate(cfg, req.seed)
        return _run_response(rep, metrics, keys)

    @app.post("/v1/replay", response_model=RunResponse)
    def replay(req: ReplayRequest):
        cfg = _load_or_422(req.config_ini)
        try:
            rep, metrics, keys = run_replay(cfg, req.counts, req.seed)
        except ConfigError as exc:
            raise HTTPException(status_code=422,
                                detail={"errors": exc.problems}) from exc
        return _run_response(rep, metrics, keys)

    @app.post("/v1/sweep", response_model=SweepResponse)
    def sweep(req: SweepRequest):
        cfg = _load_or_422(req.config_ini)
        try:
            rows, csv_text = run_sweep(cfg, req.parameter, req.values,
                                       req.seed, jobs=req.jobs,
                                       config_text=req.config_ini)
        except ConfigError as exc:
            raise HTTPException(status_code=422,
                                detail={"errors": exc.problems}) from exc
        return SweepResponse(parameter=req.parameter, rows=rows, csv=csv_text)

    @app.post("/v1/selftest", response_model=SelftestResponse)
    def selftest():
        checks = run_selftest()
        return SelftestResponse(passed=all(c["ok"] for c in checks),
                                checks=[SelftestCheck(**c) for c in checks])

    return app


app = create_app()
