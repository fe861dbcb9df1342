"""Threshold calibration and rejection sampling over selection vectors.

Draw pipeline: sample indices are dense integers. Indices [0, n_calibration)
belong to the calibration phase; rejection sampling continues from index
n_calibration. Acceptance of index i is a pure function of
(seed, i, input, predictor, threshold), and results are re-sequenced into
ascending index order before any bookkeeping, so the accepted stream is
invariant to the worker count.

Acceptance is inclusive: a sample is kept when its loss is <= the
threshold. The evaluation budget caps the number of post-calibration
draws; hitting it yields partial results plus statistics, and the caller
decides what to do with them.
"""

from __future__ import annotations

import math
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field

import numpy as np

from .chunking import ChunkGrid
from .errors import UsageError
from .models import Predictor
from .rng import StratifiedMaskSampler
from .tensor_io import InputTensor

DEFAULT_CALIBRATION = 256
DEFAULT_PERCENTILE_W = 20.0
DEFAULT_BATCH_SIZE = 32
DEFAULT_CAP_FACTOR = 100


@dataclass(frozen=True)
class SamplerConfig:
    n_target: int
    n_calibration: int = DEFAULT_CALIBRATION
    percentile_w: float = DEFAULT_PERCENTILE_W
    n_total_cap: int | None = None
    seed: int = 0
    batch_size: int = DEFAULT_BATCH_SIZE

    def __post_init__(self):
        if self.n_target < 1:
            raise UsageError("n_target must be >= 1")
        if not 0.0 < self.percentile_w < 100.0:
            raise UsageError("percentile_w must be in (0, 100)")
        if self.cap < self.n_target:
            raise UsageError("n_total_cap must be >= n_target")
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")

    @property
    def cap(self) -> int:
        if self.n_total_cap is not None:
            return int(self.n_total_cap)
        return DEFAULT_CAP_FACTOR * self.n_target


@dataclass(frozen=True)
class LossThreshold:
    """Acceptance cutoff on the loss; nonnegative and finite unless explicit +inf."""

    value: float
    provenance: str = "explicit"

    def __post_init__(self):
        if math.isnan(self.value) or self.value < 0.0:
            raise UsageError(f"threshold must be >= 0, got {self.value}")


@dataclass
class AcceptanceStats:
    """Draw accounting for the rejection phase (calibration excluded)."""

    attempted: int = 0
    accepted: int = 0

    @property
    def rate(self) -> float:
        return self.accepted / self.attempted if self.attempted else 0.0


@dataclass
class RejectionOutcome:
    stats: AcceptanceStats
    exhausted: bool
    threshold: LossThreshold
    first_index: int
    collected: list = field(default_factory=list)


def nearest_rank(values, percentile: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * N)-th order statistic."""
    arr = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if arr.size == 0:
        raise UsageError("percentile of an empty sample")
    if not 0.0 < percentile < 100.0:
        raise UsageError("percentile must be in (0, 100)")
    rank = max(1, math.ceil(percentile / 100.0 * arr.size))
    return float(arr[rank - 1])


def _masked_batch(values32: np.ndarray, shape, grid: ChunkGrid, bits: np.ndarray) -> np.ndarray:
    """Materialize filtered inputs for a block of selections, shape (b, *shape)."""
    coord_mask = bits[:, grid.chunk_id_map]
    batch = np.where(coord_mask, values32[None, :], np.float32(0.0))
    return batch.reshape((bits.shape[0],) + tuple(shape))


def _evaluate_block(
    mask_sampler: StratifiedMaskSampler,
    grid: ChunkGrid,
    tensor: InputTensor,
    predictor: Predictor,
    start: int,
    count: int,
    batch_size: int,
):
    bits_block = mask_sampler.draw_block(start, count)
    losses = np.empty(count, dtype=np.float64)
    for ofs in range(0, count, batch_size):
        sub = bits_block[ofs : ofs + batch_size]
        batch = _masked_batch(tensor.values, tensor.shape, grid, sub)
        losses[ofs : ofs + sub.shape[0]] = predictor.evaluate_batch(batch)
    return bits_block, losses


def _blocks_in_order(
    predictor: Predictor,
    tensor: InputTensor,
    grid: ChunkGrid,
    config: SamplerConfig,
    start_index: int,
    max_count: int | None,
    workers: int,
):
    """Yield (block_start, bits, losses) blocks in ascending index order.

    Blocks are evaluated concurrently on a thread pool but always handed
    back in order. Respects the predictor's declared max concurrency.
    """
    mask_sampler = StratifiedMaskSampler(config.seed, grid.num_chunks)
    if predictor.max_concurrency is not None:
        workers = min(workers, predictor.max_concurrency)
    workers = max(1, workers)
    block = max(config.batch_size, 128)

    def starts():
        pos = start_index
        end = None if max_count is None else start_index + max_count
        while end is None or pos < end:
            size = block if end is None else min(block, end - pos)
            yield pos, size
            pos += size

    if workers == 1:
        for pos, size in starts():
            bits, losses = _evaluate_block(
                mask_sampler, grid, tensor, predictor, pos, size, config.batch_size
            )
            yield pos, bits, losses
        return

    schedule = starts()
    pool = ThreadPoolExecutor(max_workers=workers)
    pending = {}
    done_blocks = {}
    next_start = start_index
    try:
        in_flight = workers + 2
        for _ in range(in_flight):
            try:
                pos, size = next(schedule)
            except StopIteration:
                break
            pending[
                pool.submit(
                    _evaluate_block,
                    mask_sampler, grid, tensor, predictor, pos, size, config.batch_size,
                )
            ] = (pos, size)
        while pending or next_start in done_blocks:
            while next_start in done_blocks:
                bits, losses, size = done_blocks.pop(next_start)
                yield next_start, bits, losses
                next_start += size
            if not pending:
                break
            finished, _ = wait(pending, return_when=FIRST_COMPLETED)
            for fut in finished:
                pos, size = pending.pop(fut)
                bits, losses = fut.result()
                done_blocks[pos] = (bits, losses, size)
                try:
                    npos, nsize = next(schedule)
                except StopIteration:
                    continue
                pending[
                    pool.submit(
                        _evaluate_block,
                        mask_sampler, grid, tensor, predictor, npos, nsize, config.batch_size,
                    )
                ] = (npos, nsize)
    finally:
        for fut in pending:
            fut.cancel()
        pool.shutdown(wait=True, cancel_futures=True)


def calibrate_threshold(
    predictor: Predictor,
    tensor: InputTensor,
    grid: ChunkGrid,
    config: SamplerConfig,
    workers: int = 1,
) -> tuple[LossThreshold, np.ndarray]:
    """Initial sampling phase: draw indices [0, n_calibration), take the
    configured percentile of the observed losses as the threshold.

    Returns the threshold plus the calibration losses for reuse.
    """
    if config.n_calibration < 20:
        raise UsageError("calibration needs at least 20 samples")
    losses = np.empty(config.n_calibration, dtype=np.float64)
    for pos, _bits, block_losses in _blocks_in_order(
        predictor, tensor, grid, config, 0, config.n_calibration, workers
    ):
        losses[pos : pos + block_losses.size] = block_losses
    value = nearest_rank(losses, config.percentile_w)
    threshold = LossThreshold(
        value=value,
        provenance=(
            f"calibrated(percentile={config.percentile_w:g}, "
            f"n={config.n_calibration})"
        ),
    )
    return threshold, losses


def run_rejection_sampling(
    predictor: Predictor,
    tensor: InputTensor,
    grid: ChunkGrid,
    threshold: LossThreshold,
    config: SamplerConfig,
    workers: int = 1,
    sink=None,
    start_index: int | None = None,
    collect: bool = False,
) -> RejectionOutcome:
    """Emit the first n_target accepted samples in draw order.

    ``sink(index, bits, loss)`` is called for every accepted sample in
    strictly ascending index order; with ``collect=True`` the accepted
    triples are also returned. Stops early with ``exhausted=True`` when
    the evaluation cap passes without n_target acceptances.
    """
    first_index = config.n_calibration if start_index is None else start_index
    stats = AcceptanceStats()
    outcome = RejectionOutcome(
        stats=stats, exhausted=False, threshold=threshold, first_index=first_index
    )

    def emit(index: int, bits: np.ndarray, loss: float):
        if sink is not None:
            sink(index, bits, loss)
        if collect:
            outcome.collected.append((index, bits, loss))

    blocks = _blocks_in_order(
        predictor, tensor, grid, config, first_index, config.cap, workers
    )
    try:
        for pos, bits_block, losses in blocks:
            cap_left = config.cap - stats.attempted
            take = min(losses.size, cap_left)
            accept = losses[:take] <= threshold.value
            cum = np.cumsum(accept)
            need = config.n_target - stats.accepted
            if cum.size and cum[-1] >= need:
                stop = int(np.searchsorted(cum, need))
                for rel in np.flatnonzero(accept[: stop + 1]):
                    emit(pos + int(rel), bits_block[rel], float(losses[rel]))
                stats.attempted += stop + 1
                stats.accepted += need
                return outcome
            for rel in np.flatnonzero(accept):
                emit(pos + int(rel), bits_block[rel], float(losses[rel]))
            stats.attempted += take
            stats.accepted += int(cum[-1]) if cum.size else 0
            if stats.attempted >= config.cap:
                break
    finally:
        blocks.close()
    outcome.exhausted = True
    return outcome
