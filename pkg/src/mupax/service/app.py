"""HTTP service exposing the attribution engine.

All endpoints are thin wrappers over the run handlers; engine errors map
to machine-readable JSON bodies with stable error codes.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__, runs
from ..errors import (
    BudgetExhaustedError,
    ConfigMismatchError,
    MupaxError,
    NotFoundError,
    ProtocolError,
    UsageError,
)
from . import schemas

app = FastAPI(
    title="mupax",
    version=__version__,
    description="Perturbation attribution engine: saliency runs, "
    "enumeration oracle, evaluation harness, bridge checks.",
)


def _status_for(exc: MupaxError) -> int:
    if isinstance(exc, NotFoundError):
        return 404
    if isinstance(exc, ConfigMismatchError):
        return 409
    if isinstance(exc, ProtocolError):
        return 502
    if isinstance(exc, BudgetExhaustedError):
        return 422
    if isinstance(exc, UsageError):
        return 400
    return 500


@app.exception_handler(MupaxError)
async def mupax_error_handler(_request: Request, exc: MupaxError) -> JSONResponse:
    return JSONResponse(status_code=_status_for(exc), content=exc.to_json())


@app.get("/v1/health", response_model=schemas.HealthResponse)
def health() -> schemas.HealthResponse:
    return schemas.HealthResponse(status="ok", version=__version__)


@app.post("/v1/attribute", response_model=schemas.AttributeResponse)
def attribute(req: schemas.AttributeRequest) -> schemas.AttributeResponse:
    return runs.attribute_run(req)


@app.post("/v1/oracle", response_model=schemas.OracleResponse)
def oracle(req: schemas.OracleRequest) -> schemas.OracleResponse:
    return runs.oracle_run(req)


@app.post("/v1/crosscheck", response_model=schemas.CrosscheckResponse)
def crosscheck(req: schemas.CrosscheckRequest) -> schemas.CrosscheckResponse:
    return runs.crosscheck_run(req)


@app.post("/v1/eval", response_model=schemas.EvalResponse)
def eval_task(req: schemas.EvalRequest) -> schemas.EvalResponse:
    return runs.eval_run(req)


@app.post("/v1/sweep", response_model=schemas.SweepResponse)
def sweep(req: schemas.SweepRequest) -> schemas.SweepResponse:
    return runs.sweep_run(req)


@app.post("/v1/bridge-check", response_model=schemas.BridgeCheckResponse)
def bridge_check(req: schemas.BridgeCheckRequest) -> schemas.BridgeCheckResponse:
    return runs.bridge_check_run(req)
