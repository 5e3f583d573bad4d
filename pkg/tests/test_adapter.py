import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reprompt.adapter import AdapterState, interpolate, knn_probability
from reprompt.numerics import Tensor, grad_check, l2_normalize


def test_hand_example():
    keys = np.array([[1.0, 0.0], [0.0, 1.0], [0.7071, 0.7071]])
    adapter = AdapterState(keys, [0, 1, 0], 2, tau=1.0)
    p = knn_probability(adapter, np.array([1.0, 0.0])).data
    a, b, c = math.exp(1.0), math.exp(0.0), math.exp(0.7071)
    np.testing.assert_allclose(p, [(a + c) / (a + b + c), b / (a + b + c)], atol=1e-15)
    np.testing.assert_allclose(p, [0.8260, 0.1740], atol=1e-4)


def test_large_tau_goes_one_hot():
    keys = np.eye(4)
    adapter = AdapterState(keys, np.arange(4), 4, tau=200.0)
    for c in range(4):
        p = knn_probability(adapter, keys[c]).data
        assert p[c] > 1 - 1e-12


def test_equal_similarities_follow_class_counts():
    keys = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
    adapter = AdapterState(keys, [0, 0, 0, 1], 2, tau=5.0)
    np.testing.assert_allclose(knn_probability(adapter, np.array([1.0, 0.0])).data, [0.75, 0.25], atol=1e-15)


def test_dominance_with_self_in_cache():
    rng = np.random.default_rng(0)
    q = np.array([1.0, 0.0, 0.0])
    others = rng.normal(size=(40, 3))
    others /= np.linalg.norm(others, axis=1, keepdims=True)
    for cap in (0.9, 0.7):
        rest = others[others @ q <= cap][:10]
        keys = np.vstack([q, rest])
        labels = np.concatenate([[2], rng.integers(0, 2, len(rest))])
        p = knn_probability(AdapterState(keys, labels, 3, tau=30.0), q).data[2]
        # self mass e^30 against at most m entries of e^(30 * cap)
        assert p >= 1.0 / (1.0 + len(rest) * math.exp(-30.0 * (1.0 - cap))) - 1e-15
    assert p >= 0.99


def test_topk_cutoff():
    keys = np.array([[1.0, 0.0], [0.8, 0.6], [0.0, 1.0]])
    full = AdapterState(keys, [0, 1, 1], 2, tau=2.0)
    cut = AdapterState(keys, [0, 1, 1], 2, tau=2.0, topk=2)
    q = np.array([1.0, 0.0])
    w = np.exp(2.0 * np.array([1.0, 0.8]))
    np.testing.assert_allclose(knn_probability(cut, q).data, w / w.sum(), atol=1e-15)
    assert not np.allclose(knn_probability(full, q).data, knn_probability(cut, q).data)


def test_adapter_errors():
    with pytest.raises(ValueError):
        AdapterState(np.zeros((0, 2)), [], 2)
    with pytest.raises(ValueError):
        AdapterState(np.eye(2), [0, 1], 2, tau=0.0)
    with pytest.raises(ValueError):
        AdapterState(np.eye(2), [0, 1], 2, lam=1.5)
    with pytest.raises(ValueError):
        knn_probability(AdapterState(np.eye(2), [0, 1], 2), np.ones(3))


def test_onehot_rows_sum_to_one():
    adapter = AdapterState(np.eye(3), [2, 0, 2], 3)
    np.testing.assert_array_equal(adapter.label_onehot.sum(axis=1), 1.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 60), st.integers(1, 20))
def test_knn_is_distribution(seed, tau, n):
    rng = np.random.default_rng(seed)
    keys = rng.normal(size=(n, 6))
    keys /= np.linalg.norm(keys, axis=1, keepdims=True)
    q = rng.normal(size=6)
    q /= np.linalg.norm(q)
    p = knn_probability(AdapterState(keys, rng.integers(0, 4, n), 4, tau=tau), q).data
    assert (p >= 0).all() and abs(p.sum() - 1.0) < 1e-12


def test_key_and_query_gradients():
    rng = np.random.default_rng(1)
    adapter = AdapterState(rng.normal(size=(6, 4)), [0, 1, 2, 0, 1, 2], 3, tau=4.0)
    z = Tensor(rng.normal(size=(2, 4)), requires_grad=True)

    def fn():
        p = knn_probability(adapter, l2_normalize(z, axis=-1))
        return (p * np.array([[1.0, -2.0, 0.5], [0.3, 0.1, -1.0]])).sum()

    assert grad_check(fn, [adapter.cache_keys, z]) < 1e-6


def test_frozen_keys_carry_no_grad():
    adapter = AdapterState(np.eye(2), [0, 1], 2, keys_frozen=True)
    assert not adapter.cache_keys.requires_grad


# -- interpolation ------------------------------------------------------------


def test_interpolate_hand_example():
    np.testing.assert_allclose(interpolate([0.8, 0.2], [0.6, 0.4], 0.5).data, [0.7, 0.3], atol=1e-15)


def test_interpolate_limits_exact():
    a, b = np.array([0.9, 0.1]), np.array([0.3, 0.7])
    assert interpolate(a, b, 0.0).data.tobytes() == b.tobytes()
    assert interpolate(a, b, 1.0).data.tobytes() == a.tobytes()
    with pytest.raises(ValueError):
        interpolate(a, b, -0.1)
    with pytest.raises(ValueError):
        interpolate(a, np.array([1.0]), 0.5)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 1), st.floats(0, 1))
def test_interpolate_distribution_and_monotone(seed, l1, l2):
    rng = np.random.default_rng(seed)
    a, b = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))
    lo, hi = sorted((l1, l2))
    p_lo, p_hi = interpolate(a, b, lo).data, interpolate(a, b, hi).data
    assert abs(p_lo.sum() - 1) < 1e-12 and (p_lo >= 0).all()
    # moving lambda up moves each class toward p_knn
    assert (np.sign(p_hi - p_lo) * np.sign(a - b) >= 0).all() or np.allclose(p_hi, p_lo)
