import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfswitch.coeffs import (RNotInvertible, best_response_kappa_window, check_game_structure,
                             check_positive_definiteness, compute_game_kappa_bounds, compute_kappa_bounds,
                             eliminate_cross_terms, gather, make_game, make_lq, transform_control,
                             twin_without_cross_terms, untransform_control)

small = st.floats(-1.0, 1.0)


def test_blocks_expand_by_regime_and_piece():
    c = make_lq(n=2, m=1, d=1, d0=0, m0=2, breaks=(0.0, 1.0), A=np.eye(2), B=[[[1.0], [0.0]], [[0.0], [1.0]]])
    assert c.A.shape == (2, 2, 2, 2)
    assert c.B.shape == (2, 2, 2, 1)
    np.testing.assert_array_equal(c.B[1, 0, :, 0], [0.0, 1.0])
    assert c.M.shape == (2, 2, 0, 2)
    assert c.pieces == 2
    np.testing.assert_array_equal(c.piece_index([0.0, 0.5, 1.0, 3.0]), [0, 0, 1, 1])


def test_gather_follows_time_and_regime():
    c = make_lq(m0=2, breaks=(0.0, 1.0), Q=[[[[1.0]], [[2.0]]], [[[3.0]], [[4.0]]]])
    vals = gather(c.Q, c, np.array([0.5, 1.5]), np.array([[0, 1], [1, 0]]))
    np.testing.assert_array_equal(vals[..., 0, 0], [[1.0, 3.0], [4.0, 2.0]])


def test_bad_shapes_rejected():
    with pytest.raises(ValueError):
        make_lq(n=2, A=np.ones((3, 3)))
    with pytest.raises(TypeError):
        make_lq(unknown=1.0)


def test_positive_definiteness_reports_blocks():
    assert check_positive_definiteness(make_lq(Q=1.0, R=1.0)).passed
    rep = check_positive_definiteness(make_lq(Q=1.0, R=1.0, S=2.0))
    assert not rep.passed
    assert {e.name for e in rep.failures} == {"[[Q,S^T],[S,R]]", "[[Q+Qbar,(S+Sbar)^T],[S+Sbar,R+Rbar]]"}
    assert not check_positive_definiteness(make_lq(R=0.0)).passed


def test_cross_term_elimination_requires_invertible_r():
    with pytest.raises(RNotInvertible):
        eliminate_cross_terms(make_lq(R=0.0))


@given(small, small, small, small, st.floats(0.5, 2.0), st.floats(0.0, 1.0))
@settings(max_examples=40, deadline=None)
def test_transform_round_trip(S, Sbar, x, u, R, Rbar):
    c = make_lq(S=S, Sbar=Sbar, R=R, Rbar=Rbar, Q=1.0)
    X = np.array([[[x], [x + 1.0]]])
    EX = X.mean(axis=1, keepdims=True)
    U = np.array([[[u], [-u]]])
    reg = np.zeros(1, dtype=int)
    uu = transform_control(c, X, EX, U, 0.0, reg)
    np.testing.assert_allclose(untransform_control(c, X, EX, uu, 0.0, reg), U, atol=1e-12)
    # the mean of the transformed control uses the summed blocks
    np.testing.assert_allclose(uu.mean(axis=1), U.mean(axis=1) + (S + Sbar) / (R + Rbar) * EX[:, 0], atol=1e-12)


def test_twin_without_cross_terms_is_fixed_point():
    c = make_lq(A=-1.0, B=0.5, Q=1.0, S=0.3, R=1.0, q=[0.1], r=[0.2])
    twin = twin_without_cross_terms(c)
    assert np.all(twin.S == 0) and np.all(twin.Sbar == 0)
    tc, tt = eliminate_cross_terms(c), eliminate_cross_terms(twin)
    np.testing.assert_allclose(tt.A, tc.A)
    np.testing.assert_allclose(tt.Q, tc.Q)
    np.testing.assert_allclose(tc.A, -1.0 - 0.5 * 0.3)
    np.testing.assert_allclose(tc.Q, 1.0 - 0.09)


def test_kappa_bounds_scalar():
    c = make_lq(A=-1.0, C=0.3, M=0.2, Q=1.0, R=1.0, kappa_star=10.0)
    b = compute_kappa_bounds(eliminate_cross_terms(c), -0.5, 10.0)
    assert b.kappa_x == pytest.approx(-2.0 + 0.09 + 0.04)
    assert b.kappa_bar == pytest.approx(2.0 - 0.13)
    assert b.kappa_y == pytest.approx(-0.5 - 1.0)


def test_game_structure_names_the_broken_identity():
    lq = make_lq(B=1.0, Bbar=0.5, Q=1.0, R=1.0)
    ok = check_game_structure(make_game(lq, k=0.5))
    assert ok.passed
    bad = check_game_structure(make_game(lq, k=2.0))
    assert [e.name for e in bad.failures] == ["Bbar = k*B"]
    worse = check_game_structure(make_game(make_lq(Abar=1.0, Q=1.0, R=1.0), k=-2.0))
    assert {"Abar = 0", "k >= -1"} <= {e.name for e in worse.failures}
    assert "checks" in bad.as_dict()


def test_game_bounds_and_window():
    g = make_game(make_lq(A=-1.0, B=0.5, C=0.3, Q=1.0, R=1.0, Qbar=0.5, Rbar=0.5, S=0.2, kappa_star=10.0),
                  0.1, 0.1, 0.0)
    gb = compute_game_kappa_bounds(g, -0.5, 10.0)
    lo, hi = best_response_kappa_window(g, -0.5, 10.0)
    assert hi == pytest.approx(min(-gb.kappa_x, 10.0))
    assert lo < hi
