import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from subtypeseg.fusion import (
    MODEL_ORDER,
    WEIGHT_PRESETS,
    EnsembleWeights,
    argmax_labels,
    estimate_weights,
    fuse,
)
from subtypeseg.volume import Geometry, ProbabilityStack

from synth import one_hot

CHANNELS = ("background", "a", "b", "c")
ALPHABET = ((1, "a"), (2, "b"), (3, "c"))


def random_stack(rng, shape=(4, 4, 4), geometry=None):
    p = rng.random((len(CHANNELS),) + shape)
    p /= p.sum(axis=0, keepdims=True)
    return ProbabilityStack(p, CHANNELS, geometry or Geometry(shape), normalized=True)


def test_weights_normalize():
    w = EnsembleWeights(("x", "y"), (2.0, 6.0))
    assert w.weights == (0.25, 0.75)
    assert sum(WEIGHT_PRESETS["ped"].weights) == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(ValueError):
        EnsembleWeights(("x",), (0.0,))
    with pytest.raises(ValueError):
        EnsembleWeights(("x", "y"), (1.0, -1.0))
    with pytest.raises(ValueError):
        EnsembleWeights(("x", "x"), (1.0, 1.0))


def test_presets_are_published_values():
    assert WEIGHT_PRESETS["ped"].as_dict() == pytest.approx(dict(zip(MODEL_ORDER, (0.33, 0.34, 0.33))))
    assert WEIGHT_PRESETS["men-rt"].as_dict() == pytest.approx(dict(zip(MODEL_ORDER, (0.33, 0.33, 0.34))))
    assert WEIGHT_PRESETS["met"].as_dict() == pytest.approx(dict(zip(MODEL_ORDER, (0.487, 0.513, 0.0))))


def test_one_hot_weights_reproduce_stack():
    rng = np.random.default_rng(0)
    stacks = [random_stack(rng) for _ in range(3)]
    for i in range(3):
        w = [0.0, 0.0, 0.0]
        w[i] = 1.0
        out = fuse(stacks, w)
        assert out.data.tobytes() == stacks[i].data.tobytes()


def test_ped_weights_hand_computed():
    g = Geometry((2, 1, 1))
    vals = [np.array([[0.2, 0.9], [0.8, 0.1]]), np.array([[0.6, 0.5], [0.4, 0.5]]), np.array([[1.0, 0.0], [0.0, 1.0]])]
    stacks = [ProbabilityStack(v.reshape(2, 2, 1, 1), ("background", "a"), g, True) for v in vals]
    out = fuse(stacks, WEIGHT_PRESETS["ped"]).data.reshape(2, 2)
    expect = 0.33 * vals[0] + 0.34 * vals[1] + 0.33 * vals[2]
    assert np.allclose(out, expect, rtol=0, atol=1e-12)


def test_zero_weight_stack_is_ignored():
    rng = np.random.default_rng(1)
    a, b = random_stack(rng), random_stack(rng)
    garbage = ProbabilityStack(np.full(a.data.shape, np.nan), CHANNELS, a.geometry)
    other = ProbabilityStack(rng.normal(size=a.data.shape) * 1e6, CHANNELS, a.geometry)
    w = WEIGHT_PRESETS["met"]
    x, y = fuse([a, b, garbage], w), fuse([a, b, other], w)
    assert x.data.tobytes() == y.data.tobytes()
    assert not x.normalized


def test_fuse_errors():
    rng = np.random.default_rng(2)
    a = random_stack(rng)
    with pytest.raises(ValueError):
        fuse([a], [0.5, 0.5])
    with pytest.raises(ValueError):
        fuse([a, random_stack(rng, geometry=Geometry((4, 4, 4), spacing=(2, 1, 1)))], [1, 1])
    other = ProbabilityStack(a.data, ("background", "x", "y", "z"), a.geometry)
    with pytest.raises(ValueError):
        fuse([a, other], [1, 1])
    with pytest.raises(ValueError):
        fuse([], [])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31),
       w=st.lists(st.floats(0, 1), min_size=3, max_size=3).filter(lambda v: sum(v) > 1e-3))
def test_fuse_properties(seed, w):
    rng = np.random.default_rng(seed)
    stacks = [random_stack(rng) for _ in range(3)]
    weights = EnsembleWeights(MODEL_ORDER, w)
    out = fuse(stacks, weights)
    assert out.normalized
    assert np.allclose(out.data.sum(axis=0), 1.0, rtol=0, atol=1e-9)
    expect = np.zeros_like(out.data)
    for wi, s in zip(weights.weights, stacks):
        if wi:
            expect = expect + wi * s.data
    assert out.data.tobytes() == expect.tobytes()
    lo = np.min([s.data for s in stacks], axis=0)
    hi = np.max([s.data for s in stacks], axis=0)
    assert np.all(out.data >= lo - 1e-12) and np.all(out.data <= hi + 1e-12)


def test_argmax_examples():
    labels = np.random.default_rng(3).integers(0, 4, size=(4, 4, 4))
    stack = ProbabilityStack(one_hot(labels, 4), CHANNELS, Geometry((4, 4, 4)), True)
    out = argmax_labels(stack, ALPHABET)
    assert np.array_equal(out.data, labels) and out.dtype == np.uint8
    flat = ProbabilityStack(np.full((4, 4, 4, 4), 0.25), CHANNELS, Geometry((4, 4, 4)), True)
    assert not argmax_labels(flat, ALPHABET).data.any()
    with pytest.raises(ValueError):
        argmax_labels(stack, ALPHABET[:2])


def test_argmax_matches_linear_scan():
    rng = np.random.default_rng(4)
    stack = random_stack(rng)
    out = argmax_labels(stack, ALPHABET).data
    for idx in np.ndindex(stack.geometry.dims):
        best = 0
        for c in range(1, 4):
            if stack.data[(c,) + idx] > stack.data[(best,) + idx]:
                best = c
        assert out[idx] == best


def test_argmax_sparse_label_ids():
    stack = ProbabilityStack(one_hot(np.array([0, 1, 2]).reshape(3, 1, 1), 3), ("background", "x", "y"),
                             Geometry((3, 1, 1)), True)
    assert argmax_labels(stack, ((2, "x"), (4, "y"))).data.ravel().tolist() == [0, 2, 4]


def test_estimate_weights():
    assert estimate_weights({"a": 0.8, "b": 0.8, "c": 0.8}).weights == pytest.approx((1 / 3,) * 3, abs=1e-15)
    assert estimate_weights({"a": 0.9, "b": 0.9, "c": 0.0}).weights == (0.5, 0.5, 0.0)
    w = estimate_weights({"a": 0.71, "b": 0.748, "c": 0.3}, exclusion_floor=0.5)
    assert w.weights[0] == pytest.approx(0.71 / (0.71 + 0.748), abs=1e-12)
    assert w.weights[1] == pytest.approx(0.748 / (0.71 + 0.748), abs=1e-12)
    assert w.weights[2] == 0.0
    assert w.weights[0] == pytest.approx(0.487, abs=1e-3)
    with pytest.raises(ValueError):
        estimate_weights({"a": 0.0, "b": 0.0})
