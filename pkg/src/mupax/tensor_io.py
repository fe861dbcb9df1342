"""Nonnegative N-dimensional input tensors and the MPXT on-disk format.

MPXT layout (little-endian, no padding, no checksum):

    magic "MPXT" | u8 version=1 | u8 rank N | N x u32 extents |
    product(extents) float32 values, row-major

Values are stored and exchanged as 32-bit reals; downstream accumulation
happens in 64-bit.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagicError,
    LengthMismatchError,
    NegativeValueError,
    NotFoundError,
    ShapeOverflowError,
)

MPXT_MAGIC = b"MPXT"
MPXT_VERSION = 1

# Hard cap on element count; keeps header-driven allocations sane.
MAX_ELEMENTS = 1 << 31


@dataclass(frozen=True)
class InputTensor:
    """Immutable nonnegative tensor with explicit shape.

    ``values`` is the flat row-major float32 array; safe to share across
    concurrent readers.
    """

    shape: tuple[int, ...]
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        shape = tuple(int(d) for d in self.shape)
        if len(shape) < 1:
            raise ShapeOverflowError("tensor rank must be >= 1")
        if any(d < 1 for d in shape):
            raise ShapeOverflowError(f"every extent must be >= 1, got {shape}")
        if math.prod(shape) > MAX_ELEMENTS:
            raise ShapeOverflowError(f"element count {math.prod(shape)} exceeds cap")
        values = np.array(self.values, dtype=np.float32, order="C").reshape(-1)
        if values.size != math.prod(shape):
            raise LengthMismatchError(
                f"got {values.size} values for shape {shape} "
                f"(expected {math.prod(shape)})"
            )
        if not np.all(np.isfinite(values)):
            raise NegativeValueError("tensor values must be finite")
        values.flags.writeable = False
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "values", values)

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def rank(self) -> int:
        return len(self.shape)

    def as_array(self) -> np.ndarray:
        """Read-only float32 view in the declared shape."""
        return self.values.reshape(self.shape)

    @classmethod
    def from_array(cls, arr) -> "InputTensor":
        arr = np.asarray(arr, dtype=np.float32)
        return cls(shape=tuple(arr.shape), values=arr.reshape(-1))


def validate_or_shift(tensor: InputTensor, mode: str = "strict") -> InputTensor:
    """Enforce nonnegativity.

    ``strict`` rejects any negative value; ``shift-min`` subtracts the
    minimum elementwise when it is negative (the attribution math requires
    values >= 0).
    """
    if mode not in ("strict", "shift-min"):
        raise ValueError(f"unknown mode {mode!r}")
    lo = float(tensor.values.min()) if tensor.size else 0.0
    if lo >= 0.0:
        return tensor
    if mode == "strict":
        raise NegativeValueError(f"negative value {lo} in strict mode")
    shifted = tensor.values - np.float32(lo)
    return InputTensor(shape=tensor.shape, values=shifted)


def load_tensor(path, strict: bool = True) -> InputTensor:
    """Read an MPXT file. Round-trips bit-exactly with :func:`save_tensor`."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError:
        raise NotFoundError(f"no such file: {path}") from None
    return decode_tensor(blob, strict=strict)


def decode_tensor(blob: bytes, strict: bool = True) -> InputTensor:
    if len(blob) < 6:
        raise BadMagicError("file too short for an MPXT header")
    if blob[:4] != MPXT_MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}")
    version, rank = blob[4], blob[5]
    if version != MPXT_VERSION:
        raise BadMagicError(f"unsupported MPXT version {version}")
    if rank < 1:
        raise ShapeOverflowError("rank must be >= 1")
    header_end = 6 + 4 * rank
    if len(blob) < header_end:
        raise LengthMismatchError("truncated extents header")
    extents = struct.unpack_from(f"<{rank}I", blob, 6)
    if any(d == 0 for d in extents):
        raise ShapeOverflowError(f"zero extent in {extents}")
    count = math.prod(extents)
    if count > MAX_ELEMENTS:
        raise ShapeOverflowError(f"element count {count} exceeds cap")
    payload = blob[header_end:]
    if len(payload) != 4 * count:
        raise LengthMismatchError(
            f"payload is {len(payload)} bytes, header implies {4 * count}"
        )
    values = np.frombuffer(payload, dtype="<f4").copy()
    if not np.all(np.isfinite(values)):
        raise NegativeValueError("non-finite value in payload")
    if strict and values.size and float(values.min()) < 0.0:
        raise NegativeValueError("negative value in payload (strict mode)")
    return InputTensor(shape=tuple(int(d) for d in extents), values=values)


def encode_tensor(tensor: InputTensor) -> bytes:
    head = MPXT_MAGIC + struct.pack("<BB", MPXT_VERSION, tensor.rank)
    head += struct.pack(f"<{tensor.rank}I", *tensor.shape)
    return head + tensor.values.astype("<f4").tobytes()


def encode_tensor_body(tensor: InputTensor) -> bytes:
    """MPXT bytes without the 4-byte magic (version included).

    This is the embedding used inside bridge frames and MPXS files.
    """
    return encode_tensor(tensor)[4:]


def decode_tensor_body(blob: bytes, offset: int = 0) -> tuple[InputTensor, int]:
    """Decode an embedded MPXT body; returns (tensor, next offset).

    Embedded bodies may carry any finite values (saliency standard errors,
    for example), so no sign check is applied here.
    """
    if len(blob) < offset + 2:
        raise LengthMismatchError("truncated tensor body")
    version, rank = blob[offset], blob[offset + 1]
    if version != MPXT_VERSION:
        raise BadMagicError(f"unsupported tensor body version {version}")
    if rank < 1:
        raise ShapeOverflowError("rank must be >= 1")
    pos = offset + 2
    if len(blob) < pos + 4 * rank:
        raise LengthMismatchError("truncated extents header")
    extents = struct.unpack_from(f"<{rank}I", blob, pos)
    pos += 4 * rank
    if any(d == 0 for d in extents):
        raise ShapeOverflowError(f"zero extent in {extents}")
    count = math.prod(extents)
    if count > MAX_ELEMENTS:
        raise ShapeOverflowError(f"element count {count} exceeds cap")
    if len(blob) < pos + 4 * count:
        raise LengthMismatchError("truncated tensor payload")
    values = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).copy()
    if not np.all(np.isfinite(values)):
        raise NegativeValueError("non-finite value in payload")
    tensor = InputTensor(shape=tuple(int(d) for d in extents), values=values)
    return tensor, pos + 4 * count


def save_tensor(path, tensor: InputTensor) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensor(tensor))
