"""Streaming saliency accumulation, decomposition, and mask extraction.

The estimate at coordinate a after n accepted samples is
mean_c [ weight_c * masked_value_c(a) ] with weight = 1/(loss+1); it is
bounded by 0 <= estimate <= input(a) for every n.

Accumulation is block-structured over draw indices: contributions land in
per-block partial sums (sequential within a block, 64-bit), and totals
fold in ascending block order. Accumulators over disjoint block-aligned
index ranges therefore merge into exactly the totals a single sequential
pass produces, bit for bit - this is what makes parallel runs
worker-count invariant.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .chunking import ChunkGrid, SelectionVector
from .errors import (
    BadMagicError,
    EmptyAccumulatorError,
    LengthMismatchError,
    MupaxError,
    ShapeMismatchError,
    UsageError,
)
from .sampler import nearest_rank
from .tensor_io import (
    InputTensor,
    decode_tensor_body,
    encode_tensor_body,
)

MPXS_MAGIC = b"MPXS"
MPXS_VERSION = 1
DEFAULT_MERGE_BLOCK = 4096


def weight(loss: float) -> float:
    """Inverse-error weight 1/(loss+1); strictly decreasing, in (0, 1]."""
    loss = float(loss)
    if not math.isfinite(loss) or loss < 0.0:
        raise UsageError(f"loss must be finite and >= 0, got {loss}")
    return 1.0 / (loss + 1.0)


class _Block:
    __slots__ = ("sum_wx", "sum_wx2", "retained_count", "sum_w", "n", "last_index")

    def __init__(self, size: int, num_chunks: int):
        self.sum_wx = np.zeros(size, dtype=np.float64)
        self.sum_wx2 = np.zeros(size, dtype=np.float64)
        self.retained_count = np.zeros(num_chunks, dtype=np.int64)
        self.sum_w = np.zeros(num_chunks, dtype=np.float64)
        self.n = 0
        self.last_index = -1


class Accumulator:
    """Single-writer streaming sums for one explained input.

    ``merge_block`` fixes the merge schedule: accumulators may only merge
    when their draw-index ranges cover disjoint blocks of this size.
    """

    def __init__(self, tensor: InputTensor, grid: ChunkGrid,
                 merge_block: int = DEFAULT_MERGE_BLOCK):
        if grid.input_shape != tensor.shape:
            raise ShapeMismatchError("grid shape != tensor shape")
        self.tensor = tensor
        self.grid = grid
        self.merge_block = int(merge_block)
        self._x64 = tensor.values.astype(np.float64)
        self._blocks: dict[int, _Block] = {}
        self.n = 0

    def accumulate(self, index: int, bits: np.ndarray, loss: float) -> None:
        """Fold one accepted sample in; indices must ascend within a block."""
        bits = np.asarray(bits, dtype=bool)
        if bits.size != self.grid.num_chunks:
            raise ShapeMismatchError(
                f"selection length {bits.size} != chunk count {self.grid.num_chunks}"
            )
        w = weight(loss)
        block_id = index // self.merge_block
        blk = self._blocks.get(block_id)
        if blk is None:
            blk = self._blocks[block_id] = _Block(self._x64.size, self.grid.num_chunks)
        if index <= blk.last_index:
            raise UsageError("samples must arrive in ascending draw order")
        blk.last_index = index
        coord_mask = bits[self.grid.chunk_id_map]
        wx = np.where(coord_mask, self._x64 * w, 0.0)
        blk.sum_wx += wx
        blk.sum_wx2 += wx * wx
        blk.retained_count += bits
        blk.sum_w[bits] += w
        blk.n += 1
        self.n += 1

    def merge(self, other: "Accumulator") -> None:
        """Field-wise union with an accumulator over disjoint index blocks."""
        if self.merge_block != other.merge_block:
            raise UsageError("merge blocks differ")
        if self.grid is not other.grid and (
            self.grid.input_shape != other.grid.input_shape
            or self.grid.chunk_shape != other.grid.chunk_shape
        ):
            raise UsageError("accumulators built over different grids")
        if not np.array_equal(self.tensor.values, other.tensor.values):
            raise UsageError("accumulators built over different inputs")
        overlap = self._blocks.keys() & other._blocks.keys()
        if overlap:
            raise UsageError(
                f"index ranges share merge blocks {sorted(overlap)}; "
                "parallel ranges must align to the merge-block grid"
            )
        self._blocks.update(other._blocks)
        self.n += other.n

    def _folded(self):
        sum_wx = np.zeros_like(self._x64)
        sum_wx2 = np.zeros_like(self._x64)
        retained = np.zeros(self.grid.num_chunks, dtype=np.int64)
        sum_w = np.zeros(self.grid.num_chunks, dtype=np.float64)
        for block_id in sorted(self._blocks):
            blk = self._blocks[block_id]
            sum_wx += blk.sum_wx
            sum_wx2 += blk.sum_wx2
            retained += blk.retained_count
            sum_w += blk.sum_w
        return sum_wx, sum_wx2, retained, sum_w


@dataclass(frozen=True)
class SaliencyMap:
    """Finalized attribution: per-coordinate estimate plus its CLT error bar."""

    shape: tuple[int, ...]
    values: np.ndarray = field(repr=False)
    stderr: np.ndarray = field(repr=False)
    n: int = 0
    w_used: float = 0.0
    p_hat: float = 0.0

    def as_array(self) -> np.ndarray:
        return self.values.reshape(self.shape)

    def stderr_array(self) -> np.ndarray:
        return self.stderr.reshape(self.shape)


@dataclass(frozen=True)
class ChunkDecomposition:
    """Per-chunk factors of the law-of-total-expectation identity."""

    retained_count: np.ndarray
    retention_probability: np.ndarray  # empirical P(chunk retained | accepted)
    mean_weight_given_retained: np.ndarray  # NaN where never retained
    n: int


def finalize(acc: Accumulator, w_used: float = math.inf, p_hat: float = 0.0) -> SaliencyMap:
    """Close the accumulator into a saliency map.

    stderr uses the biased (1/n) variance; the difference is immaterial at
    the sample counts this engine runs at.
    """
    if acc.n < 1:
        raise EmptyAccumulatorError("no accepted samples")
    sum_wx, sum_wx2, _retained, _sum_w = acc._folded()
    n = acc.n
    chi = sum_wx / n
    var = np.maximum(0.0, sum_wx2 / n - chi * chi)
    se = np.sqrt(var / n)
    if bool((chi < 0.0).any()) or bool((chi > acc._x64).any()):
        raise MupaxError("saliency bound violated: estimate outside [0, input]")
    return SaliencyMap(
        shape=acc.tensor.shape,
        values=chi,
        stderr=se,
        n=n,
        w_used=float(w_used),
        p_hat=float(p_hat),
    )


def decompose(acc: Accumulator, check_tol: float = 1e-9) -> ChunkDecomposition:
    """Per-chunk retention probability and conditional mean weight.

    Verifies the exact empirical identity
    estimate(a) = input(a) * retention(chunk of a) * mean_weight(chunk of a)
    at every coordinate whose chunk was ever retained.
    """
    if acc.n < 1:
        raise EmptyAccumulatorError("no accepted samples")
    sum_wx, _sum_wx2, retained, sum_w = acc._folded()
    n = acc.n
    retention = retained / n
    mean_w = np.divide(
        sum_w, retained, out=np.full(retained.shape, np.nan), where=retained > 0
    )
    chi = sum_wx / n
    cid = acc.grid.chunk_id_map
    product = acc._x64 * retention[cid] * np.nan_to_num(mean_w, nan=0.0)[cid]
    err = np.abs(chi - product)
    bound = check_tol * np.maximum(1.0, np.abs(chi))
    if bool((err > bound).any()):
        worst = float((err / np.maximum(bound, 1e-300)).max())
        raise MupaxError(
            f"decomposition identity violated ({worst:.3g}x tolerance); "
            "accumulator state is inconsistent"
        )
    return ChunkDecomposition(
        retained_count=retained,
        retention_probability=retention,
        mean_weight_given_retained=mean_w,
        n=n,
    )


def chunk_scores(saliency: SaliencyMap, grid: ChunkGrid) -> np.ndarray:
    """Per-chunk mean of the saliency values (scale-consistent across ragged chunks)."""
    if grid.input_shape != saliency.shape:
        raise ShapeMismatchError("grid shape != saliency shape")
    sums = np.bincount(grid.chunk_id_map, weights=saliency.values,
                       minlength=grid.num_chunks)
    return sums / grid.chunk_volumes


def threshold_mask(saliency: SaliencyMap, grid: ChunkGrid,
                   percentile: float = 50.0) -> SelectionVector:
    """Keep chunks scoring at or above the nearest-rank percentile (ties kept)."""
    scores = chunk_scores(saliency, grid)
    cutoff = nearest_rank(scores, percentile)
    return SelectionVector(bits=scores >= cutoff)


# --------------------------------------------------------------------------
# MPXS file format + decomposition sidecar
# --------------------------------------------------------------------------

def encode_saliency(saliency: SaliencyMap) -> bytes:
    chi = InputTensor(shape=saliency.shape,
                      values=saliency.values.astype(np.float32))
    se = InputTensor(shape=saliency.shape,
                     values=saliency.stderr.astype(np.float32))
    tail = struct.pack("<Qdd", saliency.n, saliency.w_used, saliency.p_hat)
    return (
        MPXS_MAGIC
        + bytes([MPXS_VERSION])
        + encode_tensor_body(chi)
        + encode_tensor_body(se)
        + tail
    )


def decode_saliency(blob: bytes) -> SaliencyMap:
    if len(blob) < 5 or blob[:4] != MPXS_MAGIC:
        raise BadMagicError("not an MPXS payload")
    if blob[4] != MPXS_VERSION:
        raise BadMagicError(f"unsupported MPXS version {blob[4]}")
    chi, pos = decode_tensor_body(blob, 5)
    se, pos = decode_tensor_body(blob, pos)
    if len(blob) != pos + 24:
        raise LengthMismatchError("bad MPXS trailer length")
    n, w_used, p_hat = struct.unpack_from("<Qdd", blob, pos)
    if chi.shape != se.shape:
        raise ShapeMismatchError("estimate and stderr shapes differ")
    return SaliencyMap(
        shape=chi.shape,
        values=chi.values.astype(np.float64),
        stderr=se.values.astype(np.float64),
        n=int(n),
        w_used=float(w_used),
        p_hat=float(p_hat),
    )


def save_saliency(path, saliency: SaliencyMap) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_saliency(saliency))


def load_saliency(path) -> SaliencyMap:
    with open(path, "rb") as fh:
        return decode_saliency(fh.read())


def decomposition_json(
    saliency: SaliencyMap, decomposition: ChunkDecomposition, grid: ChunkGrid
) -> str:
    chunks = []
    for j in range(grid.num_chunks):
        mean_w = decomposition.mean_weight_given_retained[j]
        chunks.append(
            {
                "chunk": j,
                "retained_count": int(decomposition.retained_count[j]),
                "retention_probability": float(decomposition.retention_probability[j]),
                "mean_weight_given_retained": (
                    None if math.isnan(mean_w) else float(mean_w)
                ),
            }
        )
    doc = {
        "n": saliency.n,
        "w_used": saliency.w_used,
        "p_hat": saliency.p_hat,
        "input_shape": list(grid.input_shape),
        "chunk_shape": list(grid.chunk_shape),
        "chunks": chunks,
    }
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"
