import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ripbench.core import (ModelParams, RngStream, argmax_label, clamp_probs,
                           one_hot, softmax)


def test_softmax_symmetry():
    np.testing.assert_allclose(softmax(np.array([0.0, 0.0])), [0.5, 0.5])


def test_softmax_hand_value():
    # e / (e + 1) for logits (1, 0)
    out = softmax(np.array([1.0, 0.0]))
    np.testing.assert_allclose(out, [0.7311, 0.2689], atol=1e-4)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(0)
    for _ in range(100):
        z = rng.normal(size=5)
        c = rng.uniform(-50, 50)
        np.testing.assert_allclose(softmax(z), softmax(z + c), atol=1e-12)


def test_softmax_rejects_nonfinite():
    with pytest.raises(ValueError):
        softmax(np.array([np.nan, 0.0]))
    with pytest.raises(ValueError):
        softmax(np.array([np.inf, 0.0]))


def test_softmax_simplex_fuzz():
    rng = np.random.default_rng(1)
    z = rng.normal(scale=10, size=(10_000, 7))
    out = softmax(z)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)
    assert (out >= 0).all()


def test_argmax_label_examples():
    assert argmax_label(np.array([0.1, 0.9])) == 1
    assert argmax_label(np.array([0.5, 0.5])) == 0  # tie -> lowest index
    assert argmax_label(np.array([0.2, 0.3, 0.5])) == 2


def test_clamp_probs_floor():
    assert clamp_probs(np.array([0.0]))[0] == 1e-12


def test_one_hot():
    np.testing.assert_array_equal(one_hot(np.array([1, 0]), 3),
                                  [[0, 1, 0], [1, 0, 0]])


def test_rng_stream_reproducible():
    a = RngStream(42, 7).gen.standard_normal(10_000)
    b = RngStream(42, 7).gen.standard_normal(10_000)
    np.testing.assert_array_equal(a, b)


def test_rng_streams_independent():
    a = RngStream(42, 7).gen.standard_normal(100)
    b = RngStream(42, 8).gen.standard_normal(100)
    assert not np.array_equal(a, b)


def test_rng_child_deterministic():
    a = RngStream(3, 1).child(5).gen.standard_normal(100)
    b = RngStream(3, 1).child(5).gen.standard_normal(100)
    np.testing.assert_array_equal(a, b)


@given(st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_rng_stream_equal_ids_equal_draws(seed, sid):
    a = RngStream(seed, sid).gen.integers(0, 1000, 50)
    b = RngStream(seed, sid).gen.integers(0, 1000, 50)
    assert np.array_equal(a, b)


def test_model_params_validation():
    with pytest.raises(ValueError):
        ModelParams(np.zeros((2, 3)), np.zeros(3))
    with pytest.raises(ValueError):
        ModelParams(np.full((2, 3), np.nan), np.zeros(2))
    p = ModelParams.zeros(2, 3)
    assert p.n_classes == 2 and p.n_features == 3
