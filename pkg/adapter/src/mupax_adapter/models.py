"""Built-in evaluators and user entry-point loading.

A model is a callable taking a float32 batch of shape (B, *input_shape)
and returning B nonnegative finite losses.
"""

from __future__ import annotations

import importlib
import json
import math
import struct
from pathlib import Path

import numpy as np


def echo_model(batch: np.ndarray):
    """Loss = sum of the tensor's values."""
    flat = np.ascontiguousarray(batch.reshape(batch.shape[0], -1), dtype=np.float64)
    return flat.sum(axis=1)


def _read_mpxt(path: Path) -> tuple[tuple[int, ...], np.ndarray]:
    blob = path.read_bytes()
    if blob[:4] != b"MPXT" or blob[4] != 1:
        raise ValueError(f"{path} is not an MPXT v1 file")
    rank = blob[5]
    extents = struct.unpack_from(f"<{rank}I", blob, 6)
    count = math.prod(extents)
    payload = blob[6 + 4 * rank :]
    if len(payload) != 4 * count:
        raise ValueError(f"{path}: payload length mismatch")
    values = np.frombuffer(payload, dtype="<f4").copy()
    return tuple(int(d) for d in extents), values


def _chunk_id_map(shape, chunk_shape) -> np.ndarray:
    counts = [-(-d // c) for d, c in zip(shape, chunk_shape)]
    per_axis = [
        np.arange(d, dtype=np.int64) // c for d, c in zip(shape, chunk_shape)
    ]
    grids = np.meshgrid(*per_axis, indexing="ij")
    return np.ravel_multi_index(tuple(grids), counts).reshape(-1).astype(np.int64)


class PlantedEvaluator:
    """Loss against a planted reference:

    sum over relevant coords of (x - ref)^2, normalized by the reference
    energy on those coords, plus epsilon times the fraction of noise
    chunks left exactly equal to the reference.
    """

    def __init__(self, reference_shape, reference_values, chunk_shape,
                 relevant_chunks, noise_chunks=(), epsilon=0.0):
        cid = _chunk_id_map(reference_shape, chunk_shape)
        self.input_shape = tuple(reference_shape)
        self._rel_coords = np.flatnonzero(np.isin(cid, list(relevant_chunks)))
        self._ref32 = np.asarray(reference_values, dtype=np.float32).reshape(-1)
        self._ref64_rel = self._ref32.astype(np.float64)[self._rel_coords]
        self._den = float((self._ref64_rel * self._ref64_rel).sum())
        if self._den <= 0:
            raise ValueError("reference has no energy on the relevant chunks")
        self._noise_coords = [np.flatnonzero(cid == j) for j in noise_chunks]
        self._epsilon = float(epsilon)

    def __call__(self, batch: np.ndarray):
        flat = np.ascontiguousarray(batch.reshape(batch.shape[0], -1))
        diff = flat[:, self._rel_coords].astype(np.float64) - self._ref64_rel
        mu = (diff * diff).sum(axis=1) / self._den
        if self._noise_coords:
            retained = np.zeros(batch.shape[0], dtype=np.float64)
            for coords in self._noise_coords:
                retained += np.all(flat[:, coords] == self._ref32[coords], axis=1)
            mu = mu + self._epsilon * (retained / len(self._noise_coords))
        return mu


def planted_from_spec(spec_path) -> PlantedEvaluator:
    """Factory for --module mupax_adapter.models:planted_from_spec."""
    path = Path(spec_path)
    doc = json.loads(path.read_text())
    ref_path = Path(doc["reference"])
    if not ref_path.is_absolute():
        ref_path = path.parent / ref_path
    shape, values = _read_mpxt(ref_path)
    return PlantedEvaluator(
        reference_shape=shape,
        reference_values=values,
        chunk_shape=tuple(doc["chunk_shape"]),
        relevant_chunks=tuple(doc["relevant_chunks"]),
        noise_chunks=tuple(doc.get("noise_chunks", ())),
        epsilon=float(doc.get("epsilon", 0.0)),
    )


def load_entry_point(spec: str, model_arg: str | None = None):
    """Resolve "pkg.mod:attr"; with a model argument, attr is a factory."""
    module_name, _, attr = spec.partition(":")
    if not module_name or not attr:
        raise ValueError(f"entry point must look like pkg.mod:attr, got {spec!r}")
    target = getattr(importlib.import_module(module_name), attr)
    if model_arg is not None:
        return target(model_arg)
    return target
