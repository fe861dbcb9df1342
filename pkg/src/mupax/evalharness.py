"""Desk-scale evaluation protocols: masked-input task metrics and deletion
faithfulness, run against synthetic tasks with known ground truth.

The two-class task plants class-discriminative energy in known chunk
regions and gives the frozen classifier spurious template weights on the
remaining chunks. Those spurious weights are what masking can remove:
attribution masks that keep only consistently-helpful chunks denoise the
classifier's view, which is the mechanism behind the mask-improves-task
property this harness measures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attribution import SaliencyMap, chunk_scores
from .chunking import ChunkGrid, SelectionVector, apply_mask, build_grid
from .errors import LabelMismatchError, LengthMismatchError, UsageError
from .models import CROSS_ENTROPY_FLOOR, FunctionPredictor, Predictor
from .tensor_io import InputTensor


# --------------------------------------------------------------------------
# classification metrics (validated against hand-computed confusion matrices)
# --------------------------------------------------------------------------

def classification_metrics(y_true, y_pred) -> dict:
    """Precision/recall/F1 with standard definitions.

    Macro values average unweighted over the classes present in the true
    labels; weighted F1 weights by class support. Undefined ratios
    (no predictions / no support) count as 0.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0 or y_true.shape != y_pred.shape:
        raise LabelMismatchError("label vectors must be nonempty and equal-length")
    classes = np.unique(y_true)
    precisions, recalls, f1s, supports = [], [], [], []
    for c in classes:
        tp = int(((y_pred == c) & (y_true == c)).sum())
        fp = int(((y_pred == c) & (y_true != c)).sum())
        fn = int(((y_pred != c) & (y_true == c)).sum())
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        precisions.append(prec)
        recalls.append(rec)
        f1s.append(f1)
        supports.append(tp + fn)
    supports_arr = np.array(supports, dtype=np.float64)
    return {
        "precision": float(np.mean(precisions)),
        "recall": float(np.mean(recalls)),
        "macro_f1": float(np.mean(f1s)),
        "weighted_f1": float(np.average(f1s, weights=supports_arr)),
        "accuracy": float((y_true == y_pred).mean()),
    }


# --------------------------------------------------------------------------
# synthetic two-class task
# --------------------------------------------------------------------------

class TemplateClassifier:
    """Frozen linear scorer over the active (nonzero) coordinates.

    score = sum(template * x over nonzero coords) / count(nonzero);
    p(class 1) = logistic(gain * score). The template carries the planted
    class signature plus fixed spurious weights on distractor chunks.
    """

    def __init__(self, template: np.ndarray, gain: float):
        self.template = np.asarray(template, dtype=np.float64).reshape(-1)
        self.gain = float(gain)

    def scores(self, batch: np.ndarray) -> np.ndarray:
        flat = batch.reshape(batch.shape[0], -1).astype(np.float64)
        active = flat != 0.0
        weighted = (flat * self.template[None, :] * active).sum(axis=1)
        counts = np.maximum(1, active.sum(axis=1))
        return weighted / counts

    def probabilities(self, batch: np.ndarray) -> np.ndarray:
        z = self.gain * self.scores(batch)
        p1 = 1.0 / (1.0 + np.exp(-z))
        return np.stack([1.0 - p1, p1], axis=1)

    def predict(self, batch: np.ndarray) -> np.ndarray:
        return (self.scores(batch) > 0.0).astype(np.int64)


@dataclass
class TwoClassTask:
    grid: ChunkGrid
    classifier: TemplateClassifier
    tensors: list[InputTensor]
    labels: np.ndarray
    class1_chunks: tuple[int, ...]
    class0_chunks: tuple[int, ...]

    @property
    def relevant_chunks(self) -> tuple[int, ...]:
        return tuple(sorted(self.class1_chunks + self.class0_chunks))

    def attribution_predictor(self, idx: int) -> Predictor:
        """Cross-entropy of the frozen classifier against the true label."""
        label = int(self.labels[idx])
        clf = self.classifier

        def loss_fn(batch):
            probs = clf.probabilities(batch)
            p_true = np.maximum(probs[:, label], CROSS_ENTROPY_FLOOR)
            return -np.log(p_true)

        return FunctionPredictor(
            loss_fn, self.grid.input_shape,
            description=f"cross-entropy vs label {label}",
        )


def make_two_class_task(
    seed: int,
    n_instances: int = 24,
    shape=(8, 8),
    chunk_shape=(2, 2),
    signature_chunks: int = 3,
    high: float = 1.0,
    low: float = 0.2,
    jitter: float = 0.1,
    distractor_range=(0.05, 1.25),
    spurious_sd: float = 2.0,
    gain: float = 8.0,
) -> TwoClassTask:
    """Build a seeded task instance set plus its frozen classifier.

    Class 1 puts high energy on one chunk region and low on the other;
    class 0 swaps them. Distractor chunks carry uninformative energy, and
    the classifier's template holds fixed random weights there - the
    spurious structure that full-input classification trips over.
    """
    rng = np.random.default_rng(seed)
    grid = build_grid(shape, chunk_shape)
    m = grid.num_chunks
    if m < 2 * signature_chunks + 1:
        raise UsageError("grid too small for the requested signature regions")
    order = rng.permutation(m)
    class1_chunks = tuple(sorted(int(j) for j in order[:signature_chunks]))
    class0_chunks = tuple(
        sorted(int(j) for j in order[signature_chunks : 2 * signature_chunks])
    )

    cid = grid.chunk_id_map
    in_c1 = np.isin(cid, class1_chunks)
    in_c0 = np.isin(cid, class0_chunks)
    in_distract = ~(in_c1 | in_c0)

    template = np.zeros(cid.size, dtype=np.float64)
    template[in_c1] = 1.0
    template[in_c0] = -1.0
    template[in_distract] = rng.normal(0.0, spurious_sd, int(in_distract.sum()))
    classifier = TemplateClassifier(template, gain)

    tensors, labels = [], []
    for i in range(n_instances):
        label = i % 2
        values = rng.uniform(*distractor_range, cid.size)
        hi = high + rng.uniform(-jitter, jitter, int(in_c1.sum()))
        lo = low + rng.uniform(-jitter, jitter, int(in_c0.sum()))
        if label == 1:
            values[in_c1], values[in_c0] = hi, lo
        else:
            values[in_c1], values[in_c0] = (
                low + rng.uniform(-jitter, jitter, int(in_c1.sum())),
                high + rng.uniform(-jitter, jitter, int(in_c0.sum())),
            )
        tensors.append(InputTensor(shape=tuple(shape), values=values.astype(np.float32)))
        labels.append(label)
    return TwoClassTask(
        grid=grid,
        classifier=classifier,
        tensors=tensors,
        labels=np.array(labels, dtype=np.int64),
        class1_chunks=class1_chunks,
        class0_chunks=class0_chunks,
    )


# --------------------------------------------------------------------------
# masked-input task metrics
# --------------------------------------------------------------------------

def masked_task_metrics(
    classifier: TemplateClassifier,
    instances: list[InputTensor],
    labels,
    masks: list[SelectionVector],
    grid: ChunkGrid,
) -> dict:
    """Run the task classifier on full vs masked inputs, side by side."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(instances) == 0:
        raise LabelMismatchError("empty dataset")
    if len(instances) != labels.size or len(instances) != len(masks):
        raise LengthMismatchError("instances, labels and masks must align")
    full = np.stack([t.as_array() for t in instances])
    masked = np.stack(
        [apply_mask(t, s, grid).as_array() for t, s in zip(instances, masks)]
    )
    return {
        "full": classification_metrics(labels, classifier.predict(full)),
        "masked": classification_metrics(labels, classifier.predict(masked)),
    }


# --------------------------------------------------------------------------
# deletion faithfulness
# --------------------------------------------------------------------------

def deletion_ranking(saliency: SaliencyMap, grid: ChunkGrid, from_top: bool = True) -> np.ndarray:
    """Chunk order for deletion; ties broken toward the lower chunk index."""
    scores = chunk_scores(saliency, grid)
    key = -scores if from_top else scores
    return np.lexsort((np.arange(grid.num_chunks), key))


def deletion_faithfulness(
    saliency: SaliencyMap,
    tensor: InputTensor,
    grid: ChunkGrid,
    predictor: Predictor,
    fractions=(0.05, 0.1, 0.2, 0.4),
    from_top: bool = True,
) -> list[dict]:
    """Loss after zeroing the highest-ranked chunks covering each fraction.

    The curve is reported as-is even when non-monotone.
    """
    fractions = [float(f) for f in fractions]
    if not fractions or any(not 0.0 < f <= 1.0 for f in fractions):
        raise UsageError("fractions must lie in (0, 1]")
    if sorted(fractions) != fractions or len(set(fractions)) != len(fractions):
        raise UsageError("fractions must be strictly increasing")
    order = deletion_ranking(saliency, grid, from_top=from_top)
    m = grid.num_chunks
    curve = []
    for frac in fractions:
        count = min(m, math.ceil(frac * m))
        keep = np.ones(m, dtype=bool)
        keep[order[:count]] = False
        masked = apply_mask(tensor, SelectionVector(bits=keep), grid)
        loss = predictor.evaluate_one(masked)
        curve.append({"fraction": frac, "chunks_deleted": int(count), "loss": loss})
    return curve
