import itertools
import json
import math

import numpy as np
import pytest

from mupax.chunking import SelectionVector, apply_mask, build_grid
from mupax.errors import (
    DegenerateReferenceError,
    EmptyInputError,
    NotAProbabilityError,
    ShapeMismatchError,
    UsageError,
)
from mupax.models import (
    DelayPredictor,
    EchoPredictor,
    LandmarkPredictor,
    PlantedModelSpec,
    PlantedPredictor,
    cross_entropy,
    gaussian_heatmap,
    load_planted_spec,
    mse,
    planted_loss,
    resolve_predictor,
    standard_loss,
    zero_one,
)
from mupax.tensor_io import InputTensor, save_tensor


def _simple_spec(epsilon=0.0, noise=()):
    # 4 chunks of 2 values each; chunks 0 and 1 relevant with equal energy
    ref = InputTensor.from_array([2.0, 0.0, 0.0, 2.0, 1.0, 1.0, 3.0, 4.0])
    grid = build_grid((8,), (2,))
    return PlantedModelSpec(
        reference=ref,
        grid=grid,
        relevant_chunks=(0, 1),
        noise_chunks=tuple(noise),
        epsilon=epsilon,
    )


def test_planted_full_retention_zero_loss():
    spec = _simple_spec()
    assert planted_loss(spec, spec.reference) == 0.0


def test_planted_all_relevant_masked_gives_one():
    spec = _simple_spec()
    s = SelectionVector(bits=[False, False, True, True])
    masked = apply_mask(spec.reference, s, spec.grid)
    assert planted_loss(spec, masked) == 1.0


def test_planted_half_energy_gives_half():
    # relevant chunks have equal reference energy; retaining only chunk 0
    # leaves exactly half the denominator in the numerator
    spec = _simple_spec()
    s = SelectionVector(bits=[True, False, True, True])
    masked = apply_mask(spec.reference, s, spec.grid)
    assert planted_loss(spec, masked) == pytest.approx(0.5, abs=1e-15)


def test_planted_epsilon_noise_term():
    spec = _simple_spec(epsilon=0.5, noise=(2, 3))
    # retain everything: relevant residual 0, both noise chunks retained
    assert planted_loss(spec, spec.reference) == pytest.approx(0.5, abs=1e-15)
    # drop one noise chunk: fraction falls to 1/2
    s = SelectionVector(bits=[True, True, False, True])
    masked = apply_mask(spec.reference, s, spec.grid)
    assert planted_loss(spec, masked) == pytest.approx(0.25, abs=1e-15)


def test_planted_monotone_in_relevant_set():
    # enumerate all masks for a small grid: adding a relevant chunk never
    # raises the loss (epsilon = 0)
    rng = np.random.default_rng(3)
    ref = InputTensor.from_array(rng.uniform(0.5, 2.0, 12).astype(np.float32))
    grid = build_grid((12,), (2,))
    spec = PlantedModelSpec(reference=ref, grid=grid, relevant_chunks=(0, 2, 4))
    pred = PlantedPredictor(spec)
    m = grid.num_chunks
    for bits in itertools.product([False, True], repeat=m):
        bits = np.array(bits)
        base = pred.evaluate_one(apply_mask(ref, SelectionVector(bits=bits), grid))
        for j in spec.relevant_chunks:
            if not bits[j]:
                more = bits.copy()
                more[j] = True
                up = pred.evaluate_one(apply_mask(ref, SelectionVector(bits=more), grid))
                assert up <= base + 1e-15


def test_planted_determinism_bit_identical():
    spec = _simple_spec(epsilon=0.25, noise=(3,))
    s = SelectionVector(bits=[True, False, True, True])
    masked = apply_mask(spec.reference, s, spec.grid)
    a = planted_loss(spec, masked)
    b = planted_loss(spec, masked)
    assert a == b
    batch = np.stack([masked.as_array()] * 3)
    losses = PlantedPredictor(spec).evaluate_batch(batch)
    assert losses[0] == a == losses[2]


def test_planted_shape_mismatch():
    spec = _simple_spec()
    with pytest.raises(ShapeMismatchError):
        planted_loss(spec, InputTensor.from_array([1.0, 2.0]))


def test_planted_degenerate_reference():
    ref = InputTensor.from_array([0.0, 0.0, 1.0, 1.0])
    grid = build_grid((4,), (2,))
    with pytest.raises(DegenerateReferenceError):
        PlantedModelSpec(reference=ref, grid=grid, relevant_chunks=(0,))


def test_planted_spec_json_roundtrip(tmp_path):
    spec = _simple_spec(epsilon=0.1, noise=(2,))
    save_tensor(tmp_path / "ref.mpxt", spec.reference)
    doc = spec.to_json("ref.mpxt")
    (tmp_path / "spec.json").write_text(json.dumps(doc))
    loaded = load_planted_spec(tmp_path / "spec.json")
    assert loaded.relevant_chunks == spec.relevant_chunks
    assert loaded.noise_chunks == spec.noise_chunks
    assert loaded.epsilon == spec.epsilon
    assert np.array_equal(loaded.reference.values, spec.reference.values)
    s = SelectionVector(bits=[True, False, True, True])
    masked = apply_mask(spec.reference, s, spec.grid)
    assert planted_loss(loaded, masked) == planted_loss(spec, masked)


def test_cross_entropy_values():
    assert cross_entropy([0.0, 1.0], 1) == 0.0
    assert cross_entropy([0.1] * 10, 7) == pytest.approx(math.log(10), abs=1e-12)


def test_cross_entropy_clamped_finite():
    p = [1.0] + [0.0] * 4
    loss = cross_entropy(p, 1)
    assert math.isfinite(loss)
    assert loss == pytest.approx(-math.log(1e-12))


def test_cross_entropy_rejects_non_probability():
    with pytest.raises(NotAProbabilityError):
        cross_entropy([0.5, 0.6], 0)
    with pytest.raises(NotAProbabilityError):
        cross_entropy([-0.1, 1.1], 0)


def test_zero_one():
    assert zero_one([0.2, 0.8], 1) == 0.0
    assert zero_one([0.2, 0.8], 0) == 1.0


def test_mse_and_heatmap():
    assert mse([1.0, 3.0], [0.0, 1.0]) == pytest.approx(2.5)
    with pytest.raises(EmptyInputError):
        mse([], [])
    target = gaussian_heatmap((5, 5), (2, 2), 1.0)
    assert target[2, 2] == pytest.approx(1.0)
    assert standard_loss("heatmap_mse", target, target) == 0.0


def test_standard_loss_dispatch():
    assert standard_loss("mse", [1.0], [1.0]) == 0.0
    assert standard_loss("zero_one", [0.9, 0.1], 0) == 0.0
    with pytest.raises(UsageError):
        standard_loss("nope", [1.0], [1.0])


def test_echo_predictor_sums_values():
    pred = EchoPredictor((2, 2))
    batch = np.array([[[1.0, 2.0], [3.0, 4.0]]], dtype=np.float32)
    assert pred.evaluate_batch(batch)[0] == 10.0


def test_landmark_predictor_prefers_landmark_region():
    pred = LandmarkPredictor((8, 8), (2, 2), sigma=1.5)
    rng = np.random.default_rng(0)
    base = rng.uniform(0.1, 0.3, (8, 8)).astype(np.float32)
    good = base.copy()
    good[1:4, 1:4] = 2.0  # energy at the landmark
    bad = base.copy()
    bad[5:8, 5:8] = 2.0  # energy far away
    losses = pred.evaluate_batch(np.stack([good, bad]))
    assert losses[0] < losses[1]


def test_delay_predictor_wraps_and_sleeps():
    import time

    inner = EchoPredictor((2,))
    pred = DelayPredictor(inner, delay_us=2000)
    batch = np.ones((4, 2), dtype=np.float32)
    t0 = time.perf_counter()
    losses = pred.evaluate_batch(batch)
    elapsed = time.perf_counter() - t0
    assert elapsed >= 0.008  # 4 evals * 2 ms
    assert np.array_equal(losses, inner.evaluate_batch(batch))


def test_resolve_predictor_specs(tmp_path):
    spec = _simple_spec()
    save_tensor(tmp_path / "ref.mpxt", spec.reference)
    (tmp_path / "spec.json").write_text(json.dumps(spec.to_json("ref.mpxt")))
    pred = resolve_predictor("planted:spec.json", base_dir=tmp_path)
    assert isinstance(pred, PlantedPredictor)
    echo = resolve_predictor("echo:", input_shape=(4,))
    assert isinstance(echo, EchoPredictor)
    delayed = resolve_predictor("echo:#delay_us=50", input_shape=(4,))
    assert isinstance(delayed, DelayPredictor)
    with pytest.raises(UsageError):
        resolve_predictor("wat:x")
