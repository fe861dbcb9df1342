"""Frozen predictors: model + target + loss bundled into one evaluator.

A predictor maps (possibly masked) inputs to a scalar loss >= 0; lower
means the input preserved what the model needs. The target is baked in at
construction, so downstream code only ever sees loss-of-input.

Built-in desk-scale predictors have known ground truth by construction,
which is what makes exact verification possible: the planted model knows
its relevant chunk set, the landmark model knows its true keypoint.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .chunking import ChunkGrid, build_grid
from .errors import (
    DegenerateReferenceError,
    EmptyInputError,
    NotAProbabilityError,
    NotFoundError,
    ShapeMismatchError,
    UsageError,
)
from .tensor_io import InputTensor, load_tensor

CROSS_ENTROPY_FLOOR = 1e-12


class Predictor:
    """Base evaluator: batch of inputs -> batch of losses.

    Subclasses implement :meth:`evaluate_batch` over a stacked float32
    array of shape ``(B, *input_shape)`` returning float64 losses ``(B,)``.
    Evaluation must be deterministic (identical bytes in, identical loss
    out) and every loss finite and >= 0.

    ``max_concurrency`` is honored by the sampling engine: predictors that
    are not safe for concurrent calls declare 1.
    """

    input_shape: tuple[int, ...]
    description: str = ""
    max_concurrency: int | None = None

    def evaluate_batch(self, batch: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def evaluate_tensors(self, tensors: list[InputTensor]) -> list[float]:
        if not tensors:
            raise EmptyInputError("empty evaluation batch")
        for t in tensors:
            if t.shape != self.input_shape:
                raise ShapeMismatchError(
                    f"predictor expects {self.input_shape}, got {t.shape}"
                )
        batch = np.stack([t.as_array() for t in tensors])
        losses = self.evaluate_batch(batch)
        return [float(x) for x in losses]

    def evaluate_one(self, tensor: InputTensor) -> float:
        return self.evaluate_tensors([tensor])[0]

    def close(self) -> None:
        """Release any external resources (connection pools, etc.)."""


def check_losses(losses: np.ndarray) -> np.ndarray:
    losses = np.asarray(losses, dtype=np.float64).reshape(-1)
    if losses.size and (not np.all(np.isfinite(losses)) or float(losses.min()) < 0.0):
        raise UsageError("predictor returned a non-finite or negative loss")
    return losses


# --------------------------------------------------------------------------
# planted model: ground-truth relevant chunks known by construction
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PlantedModelSpec:
    """Synthetic predictor whose relevant chunk set is known.

    Loss of an input against the planted reference:

        mu = sum over relevant coords of (x - ref)^2
             / sum over relevant coords of ref^2
             + epsilon * (fraction of noise chunks retained)

    A noise chunk counts as retained when the input matches the reference
    exactly on that chunk, which is detectable because references must be
    nonzero somewhere on every noise chunk.
    """

    reference: InputTensor
    grid: ChunkGrid
    relevant_chunks: tuple[int, ...]
    noise_chunks: tuple[int, ...] = ()
    epsilon: float = 0.0

    def __post_init__(self):
        rel = tuple(sorted(int(j) for j in self.relevant_chunks))
        noise = tuple(sorted(int(j) for j in self.noise_chunks))
        if not rel:
            raise UsageError("relevant chunk set must be nonempty")
        if set(rel) & set(noise):
            raise UsageError("relevant and noise chunk sets must be disjoint")
        m = self.grid.num_chunks
        for j in rel + noise:
            if not 0 <= j < m:
                raise UsageError(f"chunk index {j} not in [0, {m})")
        if self.grid.input_shape != self.reference.shape:
            raise ShapeMismatchError("grid shape != reference shape")
        if self.epsilon < 0:
            raise UsageError("epsilon must be >= 0")
        object.__setattr__(self, "relevant_chunks", rel)
        object.__setattr__(self, "noise_chunks", noise)

        cid = self.grid.chunk_id_map
        rel_coords = np.flatnonzero(np.isin(cid, rel))
        ref64 = self.reference.values.astype(np.float64)
        denom = float((ref64[rel_coords] * ref64[rel_coords]).sum())
        if denom <= 0.0:
            raise DegenerateReferenceError(
                "reference has zero energy on the relevant chunks"
            )
        for j in noise:
            if not np.any(self.reference.values[cid == j]):
                raise DegenerateReferenceError(
                    f"noise chunk {j} is all-zero in the reference; "
                    "retention would be undetectable"
                )

    def to_json(self, reference_path: str) -> dict:
        return {
            "reference": reference_path,
            "chunk_shape": list(self.grid.chunk_shape),
            "relevant_chunks": list(self.relevant_chunks),
            "noise_chunks": list(self.noise_chunks),
            "epsilon": self.epsilon,
        }


class PlantedPredictor(Predictor):
    def __init__(self, spec: PlantedModelSpec):
        self.spec = spec
        self.input_shape = spec.reference.shape
        self.description = (
            f"planted model, {len(spec.relevant_chunks)} relevant of "
            f"{spec.grid.num_chunks} chunks"
        )
        cid = spec.grid.chunk_id_map
        self._rel_coords = np.flatnonzero(np.isin(cid, spec.relevant_chunks))
        self._ref64_rel = spec.reference.values.astype(np.float64)[self._rel_coords]
        self._den = float((self._ref64_rel * self._ref64_rel).sum())
        self._noise_coords = [np.flatnonzero(cid == j) for j in spec.noise_chunks]
        self._ref32 = spec.reference.values

    def evaluate_batch(self, batch: np.ndarray) -> np.ndarray:
        flat = np.ascontiguousarray(batch.reshape(batch.shape[0], -1))
        diff = flat[:, self._rel_coords].astype(np.float64) - self._ref64_rel
        mu = (diff * diff).sum(axis=1) / self._den
        if self._noise_coords:
            retained = np.zeros(batch.shape[0], dtype=np.float64)
            for coords in self._noise_coords:
                retained += np.all(flat[:, coords] == self._ref32[coords], axis=1)
            mu = mu + self.spec.epsilon * (retained / len(self._noise_coords))
        return check_losses(mu)


def planted_loss(spec: PlantedModelSpec, x_arg: InputTensor) -> float:
    if x_arg.shape != spec.reference.shape:
        raise ShapeMismatchError(
            f"input shape {x_arg.shape} != reference shape {spec.reference.shape}"
        )
    return PlantedPredictor(spec).evaluate_one(x_arg)


def load_planted_spec(path) -> PlantedModelSpec:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise NotFoundError(f"no such file: {path}") from None
    ref_path = Path(doc["reference"])
    if not ref_path.is_absolute():
        ref_path = path.parent / ref_path
    reference = load_tensor(ref_path)
    grid = build_grid(reference.shape, doc["chunk_shape"])
    return PlantedModelSpec(
        reference=reference,
        grid=grid,
        relevant_chunks=tuple(doc["relevant_chunks"]),
        noise_chunks=tuple(doc.get("noise_chunks", ())),
        epsilon=float(doc.get("epsilon", 0.0)),
    )


# --------------------------------------------------------------------------
# standard loss functions
# --------------------------------------------------------------------------

def mse(prediction, target) -> float:
    prediction = np.asarray(prediction, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if prediction.size == 0:
        raise EmptyInputError("empty prediction")
    diff = prediction - target
    return float((diff * diff).mean())


def cross_entropy(prediction, target: int) -> float:
    p = np.asarray(prediction, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise EmptyInputError("empty probability vector")
    if float(p.min()) < 0.0 or abs(float(p.sum()) - 1.0) > 1e-6:
        raise NotAProbabilityError(
            f"probabilities must be >= 0 and sum to 1, got sum {float(p.sum())}"
        )
    if not 0 <= int(target) < p.size:
        raise EmptyInputError(f"target class {target} out of range")
    return -math.log(max(float(p[int(target)]), CROSS_ENTROPY_FLOOR))


def zero_one(prediction, target: int) -> float:
    p = np.asarray(prediction, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise EmptyInputError("empty prediction")
    return 0.0 if int(np.argmax(p)) == int(target) else 1.0


def gaussian_heatmap(shape, center, sigma: float) -> np.ndarray:
    """Unit-peak Gaussian bump; the synthetic landmark target."""
    axes = [np.arange(d, dtype=np.float64) for d in shape]
    grids = np.meshgrid(*axes, indexing="ij")
    sq = sum((g - float(c)) ** 2 for g, c in zip(grids, center))
    return np.exp(-sq / (2.0 * float(sigma) ** 2))


def heatmap_mse(prediction, target_heatmap) -> float:
    return mse(prediction, target_heatmap)


def standard_loss(kind: str, prediction, target) -> float:
    if kind == "mse":
        return mse(prediction, target)
    if kind == "cross_entropy":
        return cross_entropy(prediction, target)
    if kind == "zero_one":
        return zero_one(prediction, target)
    if kind == "heatmap_mse":
        return heatmap_mse(prediction, target)
    raise UsageError(f"unknown loss kind {kind!r}")


# --------------------------------------------------------------------------
# small predictor wrappers
# --------------------------------------------------------------------------

class EchoPredictor(Predictor):
    """Loss = sum of tensor values; mirrors the bridge adapter's echo mode."""

    def __init__(self, input_shape):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.description = "echo (sum of values)"

    def evaluate_batch(self, batch: np.ndarray) -> np.ndarray:
        flat = np.ascontiguousarray(batch.reshape(batch.shape[0], -1), dtype=np.float64)
        return check_losses(flat.sum(axis=1))


class FunctionPredictor(Predictor):
    """Wraps a plain callable (B, *shape) float32 -> (B,) losses."""

    def __init__(self, fn, input_shape, description="user function", max_concurrency=None):
        self._fn = fn
        self.input_shape = tuple(int(d) for d in input_shape)
        self.description = description
        self.max_concurrency = max_concurrency

    def evaluate_batch(self, batch: np.ndarray) -> np.ndarray:
        return check_losses(self._fn(batch))


class DelayPredictor(Predictor):
    """Adds a fixed latency per evaluation, simulating an expensive model.

    The sleep releases the GIL, so concurrent workers overlap the latency
    exactly like they would against a remote inference server.
    """

    def __init__(self, inner: Predictor, delay_us: float):
        self.inner = inner
        self.delay_s = float(delay_us) * 1e-6
        self.input_shape = inner.input_shape
        self.description = f"{inner.description} + {delay_us:g}us/eval"
        self.max_concurrency = inner.max_concurrency

    def evaluate_batch(self, batch: np.ndarray) -> np.ndarray:
        time.sleep(self.delay_s * batch.shape[0])
        return self.inner.evaluate_batch(batch)

    def close(self) -> None:
        self.inner.close()


class LandmarkPredictor(Predictor):
    """Synthetic keypoint task: the model 'attends' where input mass is.

    Predicted heatmap = x^2 normalized to unit sum; loss = MSE against a
    Gaussian bump at the true landmark. Masks that keep the chunks around
    the landmark preserve the predicted peak and score low.
    """

    def __init__(self, input_shape, landmark, sigma: float = 2.0):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.landmark = tuple(int(c) for c in landmark)
        self.sigma = float(sigma)
        self.description = f"synthetic landmark at {self.landmark}"
        target = gaussian_heatmap(self.input_shape, self.landmark, self.sigma)
        self._target = (target / target.sum()).reshape(-1)

    def evaluate_batch(self, batch: np.ndarray) -> np.ndarray:
        flat = batch.reshape(batch.shape[0], -1).astype(np.float64)
        energy = flat * flat
        total = energy.sum(axis=1, keepdims=True)
        heat = np.divide(energy, total, out=np.zeros_like(energy), where=total > 0)
        diff = heat - self._target
        return check_losses((diff * diff).mean(axis=1))


# --------------------------------------------------------------------------
# predictor spec strings ("planted:spec.json", "bridge:host:port", ...)
# --------------------------------------------------------------------------

def resolve_predictor(spec: str, input_shape=None, base_dir=None) -> Predictor:
    """Build a predictor from a CLI spec string.

    Grammar: ``kind:arg[#key=val,...]``. Supported kinds: ``planted``
    (arg = spec JSON path), ``bridge`` (arg = host:port), ``echo``,
    ``landmark`` (arg = spec JSON path). The ``delay_us`` fragment wraps
    any predictor with per-eval latency.
    """
    frag = {}
    if "#" in spec:
        spec, frag_str = spec.split("#", 1)
        for part in frag_str.split(","):
            key, _, val = part.partition("=")
            frag[key.strip()] = val.strip()
    kind, _, arg = spec.partition(":")

    if kind == "planted":
        if not arg:
            raise UsageError("planted predictor needs a spec path: planted:spec.json")
        path = Path(arg)
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        predictor: Predictor = PlantedPredictor(load_planted_spec(path))
    elif kind == "bridge":
        from .bridge import BridgePredictor  # local import: bridge depends on models

        host, _, port = arg.rpartition(":")
        if not host or not port.isdigit():
            raise UsageError("bridge predictor needs host:port")
        if input_shape is None:
            raise UsageError("bridge predictor needs a known input shape")
        predictor = BridgePredictor(host, int(port), input_shape=input_shape)
    elif kind == "echo":
        if input_shape is None:
            raise UsageError("echo predictor needs a known input shape")
        predictor = EchoPredictor(input_shape)
    elif kind == "landmark":
        path = Path(arg)
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise NotFoundError(f"no such file: {path}") from None
        predictor = LandmarkPredictor(
            input_shape=doc["input_shape"],
            landmark=doc["landmark"],
            sigma=float(doc.get("sigma", 2.0)),
        )
    else:
        raise UsageError(f"unknown predictor kind {kind!r}")

    if predictor.input_shape is not None and input_shape is not None:
        if tuple(predictor.input_shape) != tuple(input_shape):
            raise ShapeMismatchError(
                f"predictor expects {predictor.input_shape}, input is {input_shape}"
            )
    if "delay_us" in frag:
        predictor = DelayPredictor(predictor, float(frag["delay_us"]))
    return predictor
