"""Exhaustive enumeration of the exact attribution quantities for small grids.

Iterates every admissible selection vector (all 2^m - 2, excluding the
all-zero and all-one masks, mirroring the sampler's base distribution),
evaluates each filtered input, and computes the exact acceptance
probability, saliency limit, and per-chunk decomposition under the
accepted-mask conditional distribution.

This is the ground truth that Monte Carlo runs are checked against; it is
exponential in the chunk count by nature and hard-capped accordingly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attribution import SaliencyMap
from .chunking import ChunkGrid
from .errors import (
    ConfigMismatchError,
    MupaxError,
    TooFewChunksError,
    TooManyChunksError,
    ZeroAcceptanceError,
)
from .models import Predictor
from .tensor_io import InputTensor

MAX_ORACLE_CHUNKS = 20
_IDENTITY_TOL = 1e-12


@dataclass(frozen=True)
class OracleResult:
    """Exact quantities plus the full mask table.

    ``mask_ids`` encodes selections as integers with bit j = chunk j
    retained; together with ``base_probability``, ``losses`` and
    ``accepted`` it is the explicit accepted-mask distribution.
    """

    shape: tuple[int, ...]
    num_chunks: int
    threshold: float
    p_w: float
    chi_exact: np.ndarray = field(repr=False)
    retention: np.ndarray = field(repr=False)  # exact P(chunk retained | accepted)
    mean_weight: np.ndarray = field(repr=False)  # exact E[weight | retained], NaN if never
    mask_ids: np.ndarray = field(repr=False)
    base_probability: np.ndarray = field(repr=False)
    losses: np.ndarray = field(repr=False)
    accepted: np.ndarray = field(repr=False)


def _mask_bits(ids: np.ndarray, m: int) -> np.ndarray:
    return ((ids[:, None] >> np.arange(m, dtype=np.uint32)) & 1).astype(bool)


def enumerate_masks(
    tensor: InputTensor,
    grid: ChunkGrid,
    predictor: Predictor,
    threshold: float,
    batch_size: int = 256,
) -> OracleResult:
    m = grid.num_chunks
    if m < 2:
        raise TooFewChunksError("enumeration needs at least 2 chunks")
    if m > MAX_ORACLE_CHUNKS:
        raise TooManyChunksError(
            f"enumeration over {m} chunks needs 2^{m}-2 evaluations; "
            f"cap is {MAX_ORACLE_CHUNKS}"
        )
    if grid.input_shape != tensor.shape:
        raise ConfigMismatchError("grid shape != tensor shape")

    ids = np.arange(1, (1 << m) - 1, dtype=np.uint32)
    x32 = tensor.values
    cid = grid.chunk_id_map
    losses = np.empty(ids.size, dtype=np.float64)
    for ofs in range(0, ids.size, batch_size):
        bits = _mask_bits(ids[ofs : ofs + batch_size], m)
        coord_mask = bits[:, cid]
        batch = np.where(coord_mask, x32[None, :], np.float32(0.0))
        batch = batch.reshape((bits.shape[0],) + tensor.shape)
        losses[ofs : ofs + bits.shape[0]] = predictor.evaluate_batch(batch)

    popcounts = _mask_bits(ids, m).sum(axis=1)
    comb = np.array([math.comb(m, int(k)) for k in range(m + 1)], dtype=np.float64)
    base_p = 1.0 / ((m - 1) * comb[popcounts])

    accepted = losses <= threshold
    p_w = float(base_p[accepted].sum())
    if p_w <= 0.0:
        raise ZeroAcceptanceError(
            f"no mask satisfies loss <= {threshold}; acceptance probability is 0"
        )

    acc_bits = _mask_bits(ids[accepted], m)
    cond_p = base_p[accepted] / p_w
    weights = 1.0 / (losses[accepted] + 1.0)

    retention = acc_bits.astype(np.float64).T @ cond_p
    weighted = acc_bits.astype(np.float64).T @ (cond_p * weights)
    mean_weight = np.divide(
        weighted, retention, out=np.full(m, np.nan), where=retention > 0
    )

    x64 = x32.astype(np.float64)
    chi = x64 * weighted[cid]

    product = x64 * retention[cid] * np.nan_to_num(mean_weight, nan=0.0)[cid]
    if bool((np.abs(chi - product) > _IDENTITY_TOL).any()):
        raise MupaxError("exact decomposition identity failed; enumeration is broken")
    # the conditional probabilities sum to 1 only up to summation rounding,
    # so the upper bound is checked with an ulp-scale relative margin
    if bool((chi < 0.0).any()) or bool((chi > x64 * (1.0 + 1e-12)).any()):
        raise MupaxError("exact saliency violates the [0, input] bound")
    chi = np.minimum(chi, x64)

    return OracleResult(
        shape=tensor.shape,
        num_chunks=m,
        threshold=float(threshold),
        p_w=p_w,
        chi_exact=chi,
        retention=retention,
        mean_weight=mean_weight,
        mask_ids=ids,
        base_probability=base_p,
        losses=losses,
        accepted=accepted,
    )


def direct_chi(tensor: InputTensor, grid: ChunkGrid, result: OracleResult) -> np.ndarray:
    """Second summation path for the exact map: accumulate masked tensors
    mask by mask instead of factoring through per-chunk sums. Used to
    cross-check :func:`enumerate_masks` independently.
    """
    x64 = tensor.values.astype(np.float64)
    cid = grid.chunk_id_map
    acc_ids = result.mask_ids[result.accepted]
    cond_p = result.base_probability[result.accepted] / result.p_w
    weights = 1.0 / (result.losses[result.accepted] + 1.0)
    chi = np.zeros_like(x64)
    for mask_id, cp, w in zip(acc_ids, cond_p, weights):
        bits = _mask_bits(np.array([mask_id], dtype=np.uint32), result.num_chunks)[0]
        chi += cp * w * np.where(bits[cid], x64, 0.0)
    return chi


def crosscheck(
    result: OracleResult,
    maps: list[SaliencyMap],
    se_factor: float = 4.0,
) -> dict:
    """Compare Monte Carlo maps against the exact map.

    All maps must come from the same input, grid, and threshold as the
    enumeration; reports per-map error statistics and, given maps at
    several sample counts, the fitted log-log convergence slope.
    """
    entries = []
    for mc in maps:
        if tuple(mc.shape) != tuple(result.shape):
            raise ConfigMismatchError(
                f"map shape {mc.shape} != oracle shape {result.shape}"
            )
        if mc.w_used != result.threshold:
            raise ConfigMismatchError(
                f"map threshold {mc.w_used} != oracle threshold {result.threshold}"
            )
        diff = np.abs(mc.values - result.chi_exact)
        within = diff <= se_factor * mc.stderr
        entries.append(
            {
                "n": mc.n,
                "max_abs_err": float(diff.max()),
                "mean_abs_err": float(diff.mean()),
                "rmse": float(np.sqrt((diff * diff).mean())),
                "mean_se": float(mc.stderr.mean()),
                "coverage": float(within.mean()),
                "se_factor": se_factor,
            }
        )
    report = {"threshold": result.threshold, "p_w": result.p_w, "maps": entries}
    if len(entries) >= 2:
        ns = np.array([e["n"] for e in entries], dtype=np.float64)
        rmses = np.array([e["rmse"] for e in entries], dtype=np.float64)
        if bool((rmses > 0).all()):
            slope = float(np.polyfit(np.log10(ns), np.log10(rmses), 1)[0])
            report["rmse_loglog_slope"] = slope
        else:
            report["rmse_loglog_slope"] = None
    return report
