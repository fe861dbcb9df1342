"""End-to-end attribution of one input: calibrate, sample, accumulate."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .attribution import (
    Accumulator,
    ChunkDecomposition,
    SaliencyMap,
    decompose,
    finalize,
)
from .chunking import ChunkGrid
from .errors import BudgetExhaustedError
from .models import Predictor
from .sampler import (
    AcceptanceStats,
    LossThreshold,
    SamplerConfig,
    calibrate_threshold,
    run_rejection_sampling,
)
from .tensor_io import InputTensor


@dataclass
class ExplainResult:
    saliency: SaliencyMap
    decomposition: ChunkDecomposition
    threshold: LossThreshold
    stats: AcceptanceStats
    partial: bool
    snapshots: list  # (n, chi array) pairs when snapshot_at was given


def explain_instance(
    tensor: InputTensor,
    grid: ChunkGrid,
    predictor: Predictor,
    config: SamplerConfig,
    workers: int = 1,
    threshold: LossThreshold | None = None,
    snapshot_at: tuple[int, ...] = (),
) -> ExplainResult:
    """Full attribution run for one input.

    When no explicit threshold is given, one is calibrated from the
    configured initial phase; rejection sampling then continues from the
    next sample index. ``snapshot_at`` captures intermediate estimates at
    the given accepted-sample counts (for convergence studies).
    """
    if threshold is None:
        threshold, _losses = calibrate_threshold(predictor, tensor, grid, config, workers)
    acc = Accumulator(tensor, grid)
    snapshots = []
    pending = sorted(n for n in snapshot_at if 1 <= n <= config.n_target)

    def sink(index, bits, loss):
        acc.accumulate(index, bits, loss)
        if pending and acc.n == pending[0]:
            pending.pop(0)
            snapshots.append((acc.n, finalize(acc).values))

    outcome = run_rejection_sampling(
        predictor, tensor, grid, threshold, config, workers=workers, sink=sink
    )
    stats = outcome.stats
    if outcome.exhausted and acc.n == 0:
        raise BudgetExhaustedError(
            f"no sample reached loss <= {threshold.value} within "
            f"{stats.attempted} evaluations",
            attempted=stats.attempted,
            threshold=threshold.value,
        )
    saliency = finalize(acc, w_used=threshold.value, p_hat=stats.rate)
    return ExplainResult(
        saliency=saliency,
        decomposition=decompose(acc),
        threshold=threshold,
        stats=stats,
        partial=outcome.exhausted,
        snapshots=snapshots,
    )


def budget_consistency(stats: AcceptanceStats, n_target: int) -> float:
    """Relative gap between attempted and n_target / acceptance-rate."""
    if stats.accepted == 0 or stats.attempted == 0:
        return math.inf
    predicted = n_target / stats.rate
    return abs(stats.attempted - predicted) / predicted
