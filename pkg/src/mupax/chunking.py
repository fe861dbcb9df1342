"""Hyper-rectangular chunk grids and selection masks.

A grid partitions every coordinate of an input tensor into exactly one
chunk. Boundary chunks may be ragged (shorter extent on the last index of
an axis) but are never empty. Chunk enumeration is row-major over chunk
indices and is fixed: selection-vector semantics must not drift between
runs or implementations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import (
    LengthMismatchError,
    OutOfBoundsError,
    RankMismatchError,
    ZeroChunkExtentError,
)
from .tensor_io import InputTensor


@dataclass(frozen=True)
class ChunkGrid:
    input_shape: tuple[int, ...]
    chunk_shape: tuple[int, ...]

    @cached_property
    def chunk_counts(self) -> tuple[int, ...]:
        return tuple(
            -(-d // c) for d, c in zip(self.input_shape, self.chunk_shape)
        )

    @property
    def num_chunks(self) -> int:
        return math.prod(self.chunk_counts)

    @cached_property
    def chunk_id_map(self) -> np.ndarray:
        """Flat row-major array mapping every coordinate to its chunk index."""
        per_axis = [
            np.arange(d, dtype=np.int64) // c
            for d, c in zip(self.input_shape, self.chunk_shape)
        ]
        grids = np.meshgrid(*per_axis, indexing="ij")
        flat = np.ravel_multi_index(tuple(grids), self.chunk_counts).reshape(-1)
        flat = flat.astype(np.int64)
        flat.flags.writeable = False
        return flat

    @cached_property
    def chunk_volumes(self) -> np.ndarray:
        counts = np.bincount(self.chunk_id_map, minlength=self.num_chunks)
        counts.flags.writeable = False
        return counts

    def chunk_slices(self, index: int) -> tuple[slice, ...]:
        """Coordinate ranges of one chunk, as per-axis slices."""
        if not 0 <= index < self.num_chunks:
            raise OutOfBoundsError(f"chunk index {index} not in [0, {self.num_chunks})")
        multi = np.unravel_index(index, self.chunk_counts)
        out = []
        for i, (d, c) in zip(multi, zip(self.input_shape, self.chunk_shape)):
            start = int(i) * c
            out.append(slice(start, min(start + c, d)))
        return tuple(out)

    def chunk_of(self, coord) -> int:
        """Chunk index containing a coordinate."""
        coord = tuple(int(x) for x in (coord if hasattr(coord, "__len__") else (coord,)))
        if len(coord) != len(self.input_shape):
            raise RankMismatchError(
                f"coordinate rank {len(coord)} != input rank {len(self.input_shape)}"
            )
        if any(not 0 <= x < d for x, d in zip(coord, self.input_shape)):
            raise OutOfBoundsError(f"coordinate {coord} outside shape {self.input_shape}")
        multi = tuple(x // c for x, c in zip(coord, self.chunk_shape))
        return int(np.ravel_multi_index(multi, self.chunk_counts))


def build_grid(input_shape, chunk_shape) -> ChunkGrid:
    input_shape = tuple(int(d) for d in input_shape)
    chunk_shape = tuple(int(c) for c in chunk_shape)
    if len(input_shape) != len(chunk_shape):
        raise RankMismatchError(
            f"chunk rank {len(chunk_shape)} != input rank {len(input_shape)}"
        )
    for d, c in zip(input_shape, chunk_shape):
        if c < 1:
            raise ZeroChunkExtentError(f"chunk extent {c} must be >= 1")
        if c > d:
            raise ZeroChunkExtentError(f"chunk extent {c} exceeds input extent {d}")
    return ChunkGrid(input_shape=input_shape, chunk_shape=chunk_shape)


@dataclass(frozen=True)
class SelectionVector:
    """Length-m bit vector: which chunks are retained (1) vs zeroed (0)."""

    bits: np.ndarray = field(repr=False)

    def __post_init__(self):
        bits = np.array(self.bits, dtype=bool).reshape(-1)
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)

    def __len__(self) -> int:
        return self.bits.size

    @property
    def retained_count(self) -> int:
        return int(self.bits.sum())

    def complement(self) -> "SelectionVector":
        return SelectionVector(bits=~self.bits)

    def to_bytes(self) -> bytes:
        return np.packbits(self.bits.astype(np.uint8)).tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes, length: int) -> "SelectionVector":
        bits = np.unpackbits(np.frombuffer(blob, dtype=np.uint8), count=length)
        return cls(bits=bits.astype(bool))

    @classmethod
    def from_indices(cls, indices, length: int) -> "SelectionVector":
        bits = np.zeros(length, dtype=bool)
        bits[list(indices)] = True
        return cls(bits=bits)


def coordinate_mask(grid: ChunkGrid, selection: SelectionVector) -> np.ndarray:
    """Flat boolean mask over coordinates: True where the chunk is retained."""
    if len(selection) != grid.num_chunks:
        raise LengthMismatchError(
            f"selection length {len(selection)} != chunk count {grid.num_chunks}"
        )
    return selection.bits[grid.chunk_id_map]


def apply_mask(tensor: InputTensor, selection: SelectionVector, grid: ChunkGrid) -> InputTensor:
    """Filtered input: values kept on retained chunks, exactly 0.0 elsewhere."""
    if grid.input_shape != tensor.shape:
        raise LengthMismatchError(
            f"grid built for shape {grid.input_shape}, tensor has {tensor.shape}"
        )
    mask = coordinate_mask(grid, selection)
    out = np.where(mask, tensor.values, np.float32(0.0))
    return InputTensor(shape=tensor.shape, values=out)


def masked_values(values_flat: np.ndarray, grid: ChunkGrid, bits: np.ndarray) -> np.ndarray:
    """Vectorized masking over a flat values array (engine hot path)."""
    return np.where(bits[grid.chunk_id_map], values_flat, values_flat.dtype.type(0))
