"""Counter-based random generation and the base mask distribution.

Every draw is a pure function of (seed, sample index, draw slot): there is
no sequential generator state, so evaluations of distinct sample indices
can run on any worker in any order and still reproduce bit-identically.

The mixing function is the splitmix64 finalizer; per-index streams are
derived by mixing the seed, then offsetting by the index before mixing
again, which is itself a splitmix64 chain.

The base distribution over selection vectors ("stratified uniform") is:
draw the retained-chunk count k uniformly from {1, ..., m-1}, then a
uniform k-subset of the m chunks. The degenerate all-zero and all-one
masks are excluded: they carry no contrast. Each (k, subset) pair has
probability 1/(m-1) * 1/C(m, k). The enumeration oracle mirrors this
distribution exactly; any change here must change both.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import TooFewChunksError

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_SEED_SALT = 0x6A09E667F3BCC908

_U = np.uint64
_GOLDEN_U = _U(_GOLDEN)


def mix64(z: int) -> int:
    """splitmix64 finalizer, pure-Python reference path."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def _mix64_vec(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _U(30))) * _U(_MIX1)
    z = (z ^ (z >> _U(27))) * _U(_MIX2)
    return z ^ (z >> _U(31))


def stream_origin(seed: int) -> int:
    return mix64((seed & _MASK64) ^ _SEED_SALT)


class StratifiedMaskSampler:
    """Draws selection vectors from the base distribution, keyed by index.

    Draw-slot layout per sample index (m = chunk count):
      slot t*(m+1)        -> retained-count draw, attempt t (rejection for
                             unbiased bounded integers; retries are ~2^-32)
      slot g*(m+1) + j    -> subset key j in {1..m}, generation g (a new
                             generation is drawn only on a u64 key tie)
    The two slot families are disjoint, so the schedule is a fixed function
    of the sample index alone.
    """

    def __init__(self, seed: int, num_chunks: int):
        if num_chunks < 2:
            raise TooFewChunksError(
                f"need at least 2 chunks to sample non-degenerate masks, got {num_chunks}"
            )
        self.seed = int(seed)
        self.num_chunks = int(num_chunks)
        self._origin = _U(stream_origin(self.seed))

    def _stream0(self, indices: np.ndarray) -> np.ndarray:
        return _mix64_vec(self._origin + indices.astype(np.uint64) * _GOLDEN_U)

    def retained_counts(self, indices: np.ndarray) -> np.ndarray:
        """k for each index: uniform on {1, ..., m-1}, rejection-exact."""
        m = self.num_chunks
        bound = m - 1
        stream0 = self._stream0(indices)
        period = _U(m + 1)
        threshold = _U(((1 << 64) - bound) % bound)
        raw = _mix64_vec(stream0 + _GOLDEN_U)
        attempt = 1
        while True:
            reject = raw < threshold
            if not reject.any():
                break
            slot = _U(attempt * (m + 1))
            raw = np.where(
                reject,
                _mix64_vec(stream0 + (slot + _U(1)) * _GOLDEN_U),
                raw,
            )
            attempt += 1
        return (raw % _U(bound)).astype(np.int64) + 1

    def draw_block(self, start: int, count: int) -> np.ndarray:
        """Selection bits for sample indices [start, start+count), shape (count, m)."""
        m = self.num_chunks
        indices = np.arange(start, start + count, dtype=np.uint64)
        ks = self.retained_counts(indices)
        stream0 = self._stream0(indices)

        key_slots = np.arange(1, m + 1, dtype=np.uint64)
        keys = _mix64_vec(stream0[:, None] + (key_slots + _U(1))[None, :] * _GOLDEN_U)
        generation = 0
        while True:
            srt = np.sort(keys, axis=1)
            tied = (srt[:, 1:] == srt[:, :-1]).any(axis=1)
            if not tied.any():
                break
            generation += 1
            offs = (_U(generation * (m + 1)) + key_slots + _U(1)) * _GOLDEN_U
            keys[tied] = _mix64_vec(stream0[tied, None] + offs[None, :])

        order = np.argsort(keys, axis=1)
        ranks = np.empty_like(order)
        np.put_along_axis(ranks, order, np.arange(m, dtype=order.dtype)[None, :], axis=1)
        return ranks < ks[:, None]

    def draw(self, index: int) -> np.ndarray:
        return self.draw_block(index, 1)[0]


def mask_probability(num_chunks: int, retained: int) -> float:
    """Base-distribution probability of one specific mask with k retained chunks."""
    m = num_chunks
    if not 1 <= retained <= m - 1:
        return 0.0
    return 1.0 / ((m - 1) * math.comb(m, retained))
