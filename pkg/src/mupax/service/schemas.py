"""Request/response models for the service endpoints.

These models are the single request contract: the CLI builds them, the
HTTP layer validates against them, and the run handlers consume them.
"""

from __future__ import annotations

from pydantic import BaseModel, Field


class AttributeRequest(BaseModel):
    input: str = Field(description="path to the MPXT input tensor")
    predictor: str = Field(description="predictor spec, e.g. planted:spec.json")
    chunk: list[int] = Field(description="chunk extents, one per input axis")
    out: str = Field(description="output MPXS path; sidecars derive from it")
    samples: int = Field(default=1000, ge=1, description="accepted samples wanted")
    calibration: int = Field(default=256, ge=0)
    percentile_w: float = Field(default=20.0, gt=0.0, lt=100.0)
    cap: int | None = Field(default=None, description="evaluation budget")
    explicit_w: float | None = Field(
        default=None, description="skip calibration and use this threshold"
    )
    mask_percentile: float = Field(default=50.0, gt=0.0, lt=100.0)
    seed: int = 0
    workers: int = Field(default=1, ge=1)
    batch_size: int = Field(default=32, ge=1)


class AttributeResponse(BaseModel):
    n: int
    w: float
    p_hat: float
    attempted: int
    partial: bool
    wall_time_s: float
    mask_retained: int
    outputs: dict[str, str]


class OracleRequest(BaseModel):
    input: str
    predictor: str
    chunk: list[int]
    out: str
    explicit_w: float | None = None
    calibration: int = Field(default=256, ge=20)
    percentile_w: float = Field(default=20.0, gt=0.0, lt=100.0)
    seed: int = 0
    batch_size: int = Field(default=256, ge=1)


class OracleResponse(BaseModel):
    num_chunks: int
    masks_evaluated: int
    masks_accepted: int
    p_w: float
    w: float
    wall_time_s: float
    outputs: dict[str, str]


class CrosscheckRequest(BaseModel):
    input: str
    predictor: str
    chunk: list[int]
    w: float
    maps: list[str] = Field(description="MPXS paths to check, ascending n")
    se_factor: float = Field(default=4.0, gt=0.0)


class CrosscheckResponse(BaseModel):
    p_w: float
    report: dict


class EvalRequest(BaseModel):
    out: str
    seed: int = 0
    instances: int = Field(default=24, ge=2)
    samples: int = Field(default=150, ge=1)
    calibration: int = Field(default=96, ge=20)
    percentile_w: float = Field(default=20.0, gt=0.0, lt=100.0)
    mask_percentile: float = Field(default=50.0, gt=0.0, lt=100.0)
    deletion_fractions: list[float] = Field(default=[0.05, 0.1, 0.2, 0.4])
    repeats: int = Field(default=5, ge=1)
    workers: int = Field(default=1, ge=1)


class EvalResponse(BaseModel):
    report: dict
    outputs: dict[str, str]


class SweepRequest(BaseModel):
    input: str
    predictor: str
    out: str
    chunk_shapes: list[list[int]] = Field(min_length=1)
    sample_counts: list[int] = Field(default=[1000], min_length=1)
    percentiles_w: list[float] = Field(default=[20.0], min_length=1)
    calibration: int = Field(default=256, ge=20)
    mask_percentile: float = Field(default=50.0, gt=0.0, lt=100.0)
    seed: int = 0
    workers: int = Field(default=1, ge=1)


class SweepResponse(BaseModel):
    rows: list[dict]
    outputs: dict[str, str]


class BridgeCheckRequest(BaseModel):
    endpoint: str = Field(description="host:port of a live bridge server")
    expect_echo: bool = Field(
        default=False, description="also verify echo losses (sum of values)"
    )


class BridgeCheckResponse(BaseModel):
    conformant: bool
    max_batch: int
    checks: list[dict]


class HealthResponse(BaseModel):
    status: str
    version: str
