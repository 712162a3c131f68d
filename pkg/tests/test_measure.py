import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mfswitch.measure import (DimensionMismatch, EmpiricalMeasure, NonUniformUnsupported, check_e1_inequality,
                              conditional_mean, resample_uniform, second_moment, wasserstein2_1d)

finite = st.floats(-100, 100, allow_nan=False)


def W(a, b):
    return wasserstein2_1d(EmpiricalMeasure(a), EmpiricalMeasure(b))


@given(st.integers(1, 20).flatmap(lambda n: st.tuples(arrays(float, n, elements=finite),
                                                      arrays(float, n, elements=finite),
                                                      arrays(float, n, elements=finite))))
@settings(max_examples=60, deadline=None)
def test_w2_is_a_metric(triple):
    a, b, c = triple
    assert W(a, a) == 0.0
    assert W(a, b) == pytest.approx(W(b, a))
    assert W(a, c) <= W(a, b) + W(b, c) + 1e-9


@given(arrays(float, st.integers(1, 30), elements=finite), st.floats(-10, 10))
@settings(max_examples=40, deadline=None)
def test_w2_of_a_shift_is_the_shift(a, c):
    assert W(a, a + c) == pytest.approx(abs(c), abs=1e-9)


@given(st.integers(1, 5).flatmap(lambda n: st.tuples(arrays(float, n, elements=finite),
                                                     arrays(float, n, elements=finite))))
@settings(max_examples=40, deadline=None)
def test_w2_matches_best_permutation(pair):
    a, b = pair
    brute = min(np.sqrt(np.mean((a - b[list(p)]) ** 2)) for p in itertools.permutations(range(a.size)))
    assert W(a, b) == pytest.approx(brute, abs=1e-10)


@given(st.integers(1, 40).flatmap(lambda n: st.tuples(arrays(float, n, elements=finite),
                                                      arrays(float, n, elements=finite))))
@settings(max_examples=60, deadline=None)
def test_e1_chain(pair):
    assert check_e1_inequality(*pair).holds


def test_moments():
    mu = EmpiricalMeasure([[1.0, 0.0], [3.0, 2.0]], [0.25, 0.75])
    np.testing.assert_allclose(conditional_mean(mu), [2.5, 1.5])
    assert second_moment(mu) == pytest.approx(0.25 * 1 + 0.75 * 13)


def test_measure_validation():
    with pytest.raises(DimensionMismatch):
        EmpiricalMeasure([1.0, 2.0], [1.0])
    with pytest.raises(ValueError):
        EmpiricalMeasure([1.0, 2.0], [0.7, 0.7])
    with pytest.raises(NonUniformUnsupported):
        wasserstein2_1d(EmpiricalMeasure([0.0, 1.0], [0.2, 0.8]), EmpiricalMeasure([0.0, 1.0]))
    with pytest.raises(DimensionMismatch):
        wasserstein2_1d(EmpiricalMeasure(np.zeros((2, 2))), EmpiricalMeasure(np.zeros((2, 2))))
    with pytest.raises(DimensionMismatch):
        check_e1_inequality(np.zeros(3), np.zeros(4))


def test_resampling_makes_uniform_atoms():
    mu = EmpiricalMeasure([0.0, 1.0], [0.2, 0.8])
    nu = resample_uniform(mu, 4000, np.random.default_rng(0))
    assert nu.is_uniform() and nu.size == 4000
    assert conditional_mean(nu)[0] == pytest.approx(0.8, abs=0.03)
