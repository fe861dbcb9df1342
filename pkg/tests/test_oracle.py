import math

import numpy as np
import pytest

from mupax.attribution import Accumulator, finalize
from mupax.chunking import build_grid
from mupax.errors import (
    ConfigMismatchError,
    TooManyChunksError,
    ZeroAcceptanceError,
)
from mupax.models import (
    EchoPredictor,
    FunctionPredictor,
    PlantedModelSpec,
    PlantedPredictor,
)
from mupax.oracle import crosscheck, direct_chi, enumerate_masks
from mupax.rng import StratifiedMaskSampler, mask_probability
from mupax.sampler import LossThreshold, SamplerConfig, run_rejection_sampling
from mupax.tensor_io import InputTensor


def _zero_predictor(shape):
    return FunctionPredictor(
        lambda batch: np.zeros(batch.shape[0]), shape, description="always 0"
    )


def test_two_chunk_zero_loss_gives_half_input():
    # masks {10, 01} each with probability 1/2 and weight 1
    a, b = 3.0, 5.0
    tensor = InputTensor.from_array(np.array([a, b], dtype=np.float32))
    grid = build_grid((2,), (1,))
    result = enumerate_masks(tensor, grid, _zero_predictor((2,)), threshold=1.0)
    assert result.p_w == 1.0
    assert np.array_equal(result.chi_exact, [a / 2, b / 2])
    assert np.array_equal(result.retention, [0.5, 0.5])
    assert np.array_equal(result.mean_weight, [1.0, 1.0])


def test_symmetric_input_symmetric_chi():
    tensor = InputTensor.from_array(np.full(6, 2.0, dtype=np.float32))
    grid = build_grid((6,), (1,))
    result = enumerate_masks(tensor, grid, EchoPredictor((6,)), threshold=6.0)
    assert np.allclose(result.chi_exact, result.chi_exact[0], atol=1e-15)
    assert np.allclose(result.retention, result.retention[0], atol=1e-15)


def test_zero_acceptance_reported():
    tensor = InputTensor.from_array(np.ones(4, dtype=np.float32))
    grid = build_grid((4,), (2,))
    with pytest.raises(ZeroAcceptanceError):
        enumerate_masks(tensor, grid, EchoPredictor((4,)), threshold=0.5)


def test_chunk_cap_guard():
    tensor = InputTensor.from_array(np.ones(21, dtype=np.float32))
    grid = build_grid((21,), (1,))
    with pytest.raises(TooManyChunksError):
        enumerate_masks(tensor, grid, EchoPredictor((21,)), threshold=math.inf)


def test_base_probabilities_sum_to_one():
    rng = np.random.default_rng(0)
    tensor = InputTensor.from_array(rng.uniform(0.1, 1, 10).astype(np.float32))
    grid = build_grid((10,), (2,))
    result = enumerate_masks(tensor, grid, EchoPredictor((10,)), threshold=math.inf)
    assert result.base_probability.sum() == pytest.approx(1.0, abs=1e-12)
    assert result.p_w == pytest.approx(1.0, abs=1e-12)


def test_dual_summation_paths_agree():
    # per-chunk factorization vs direct per-mask accumulation
    rng = np.random.default_rng(5)
    tensor = InputTensor.from_array(rng.uniform(0, 2, 14).astype(np.float32))
    grid = build_grid((14,), (2,))
    spec = PlantedModelSpec(reference=tensor, grid=grid, relevant_chunks=(1, 4))
    pred = PlantedPredictor(spec)
    for threshold in (math.inf, 0.6):
        result = enumerate_masks(tensor, grid, pred, threshold=threshold)
        direct = direct_chi(tensor, grid, result)
        assert np.all(np.abs(result.chi_exact - direct) <= 1e-12)


def test_montecarlo_approaches_oracle():
    rng = np.random.default_rng(9)
    tensor = InputTensor.from_array(rng.uniform(0.2, 2, 12).astype(np.float32))
    grid = build_grid((12,), (2,))
    spec = PlantedModelSpec(reference=tensor, grid=grid, relevant_chunks=(0, 3))
    pred = PlantedPredictor(spec)
    threshold = 0.5
    oracle = enumerate_masks(tensor, grid, pred, threshold=threshold)

    config = SamplerConfig(n_target=20000, n_calibration=0, seed=31,
                           n_total_cap=10**7, batch_size=256)
    acc = Accumulator(tensor, grid)
    outcome = run_rejection_sampling(
        pred, tensor, grid, LossThreshold(threshold), config,
        sink=acc.accumulate, start_index=0,
    )
    mc = finalize(acc, w_used=threshold, p_hat=outcome.stats.rate)

    # acceptance rate within 4 binomial standard errors of the exact p_W
    se = math.sqrt(oracle.p_w * (1 - oracle.p_w) / outcome.stats.attempted)
    assert abs(outcome.stats.rate - oracle.p_w) <= 4 * se

    report = crosscheck(oracle, [mc])
    entry = report["maps"][0]
    assert entry["coverage"] >= 0.99
    assert entry["mean_abs_err"] <= 3 * entry["mean_se"]


def test_accepted_mask_distribution_matches_oracle():
    # empirical frequency of each accepted mask vs the oracle's conditional
    # probability, within 4 standard errors at 50k accepted samples
    rng = np.random.default_rng(13)
    tensor = InputTensor.from_array(rng.uniform(0.2, 2, 8).astype(np.float32))
    grid = build_grid((8,), (2,))
    spec = PlantedModelSpec(reference=tensor, grid=grid, relevant_chunks=(0, 2))
    pred = PlantedPredictor(spec)
    threshold = 0.55
    oracle = enumerate_masks(tensor, grid, pred, threshold=threshold)

    n_accept = 50000
    counts: dict[int, int] = {}
    config = SamplerConfig(n_target=n_accept, n_calibration=0, seed=77,
                           n_total_cap=10**7, batch_size=1024)

    def sink(_index, bits, _loss):
        mask_id = int((bits << np.arange(bits.size)).sum())
        counts[mask_id] = counts.get(mask_id, 0) + 1

    outcome = run_rejection_sampling(
        pred, tensor, grid, LossThreshold(threshold), config,
        sink=sink, start_index=0,
    )
    assert not outcome.exhausted

    cond = {}
    for mask_id, base_p, accepted in zip(
        oracle.mask_ids, oracle.base_probability, oracle.accepted
    ):
        if accepted:
            cond[int(mask_id)] = base_p / oracle.p_w
    assert set(counts) <= set(cond)
    for mask_id, p in cond.items():
        freq = counts.get(mask_id, 0) / n_accept
        se = math.sqrt(p * (1 - p) / n_accept)
        assert abs(freq - p) <= 4 * se, f"mask {mask_id}: {freq} vs {p}"


def test_oracle_mirrors_sampler_distribution():
    # the enumeration's base probabilities coincide with the sampler's
    # closed-form distribution for every admissible mask
    m = 5
    tensor = InputTensor.from_array(np.ones(m, dtype=np.float32))
    grid = build_grid((m,), (1,))
    result = enumerate_masks(tensor, grid, EchoPredictor((m,)), threshold=math.inf)
    for mask_id, p in zip(result.mask_ids, result.base_probability):
        k = bin(int(mask_id)).count("1")
        assert p == pytest.approx(mask_probability(m, k), abs=1e-15)
    # degenerate masks are excluded on both sides
    assert 0 not in result.mask_ids
    assert (1 << m) - 1 not in result.mask_ids
    sampler = StratifiedMaskSampler(seed=1, num_chunks=m)
    ks = sampler.draw_block(0, 2000).sum(axis=1)
    assert ks.min() >= 1 and ks.max() <= m - 1


def test_crosscheck_mismatch():
    tensor = InputTensor.from_array(np.ones(4, dtype=np.float32))
    grid = build_grid((4,), (2,))
    result = enumerate_masks(tensor, grid, _zero_predictor((4,)), threshold=1.0)
    acc = Accumulator(tensor, grid)
    acc.accumulate(0, np.array([True, False]), 0.0)
    wrong_w = finalize(acc, w_used=2.0, p_hat=1.0)
    with pytest.raises(ConfigMismatchError):
        crosscheck(result, [wrong_w])
