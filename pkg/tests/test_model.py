import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bayesmpc.bench import make_cooling_grid
from bayesmpc.model import (
    FeatureMap,
    GaussianBelief,
    MpcSpec,
    Polytope,
    RewardModel,
    SpecMismatch,
    UnboundedSet,
    reward_bound_cR,
    tightening_schedule,
    validate,
)

from conftest import random_belief


def _linear_reward(n, m, Cx, Cu, w, H=None):
    feats = FeatureMap(np.atleast_2d(Cx), np.atleast_2d(Cu), np.zeros(np.atleast_2d(Cx).shape[0]))
    return RewardModel.linear_in_weights(n, m, feats, np.asarray(w, float), H=H)


def test_polytope_normalizes_positive_bounds():
    P = Polytope.from_halfspaces([[2.0, 0.0], [-1.0, 0.0]], [4.0, 0.0])
    np.testing.assert_allclose(P.F[0], [0.5, 0.0])
    assert P.contains([2.0, 5.0]) and not P.contains([2.1, 0.0]) and not P.contains([-0.1, 0.0])
    A, b = P.halfspaces()
    np.testing.assert_allclose(A @ [1.0, 0.0] <= b, True)


def test_polytope_box_and_bounding_box():
    P = Polytope.box([-1.0, 0.0], [2.0, 3.0])
    lo, hi = P.bounding_box()
    np.testing.assert_allclose(lo, [-1.0, 0.0])
    np.testing.assert_allclose(hi, [2.0, 3.0])


def test_polytope_unbounded_bounding_box_raises():
    with pytest.raises(UnboundedSet):
        Polytope.from_halfspaces(np.eye(2), [1.0, 1.0]).bounding_box()


def test_polytope_row_mismatch():
    with pytest.raises(SpecMismatch):
        Polytope.from_halfspaces(np.eye(2), [1.0])


def test_tightening_schedule_is_linear_and_monotone():
    d = tightening_schedule(5, 0.05, 0.1)
    np.testing.assert_allclose(d, [0.05, 0.0625, 0.075, 0.0875, 0.1])
    np.testing.assert_allclose(tightening_schedule(1, 0.05, 0.1), [0.05])


def test_validate_desk_grid_has_no_violations():
    g = make_cooling_grid(3, 3)
    assert validate(g.spec, g.prior) == []


def test_validate_decreasing_delta():
    g = make_cooling_grid(2, 2)
    spec = MpcSpec(2, [0.1, 0.05], 1.0, 0.0, g.X, g.U)
    assert "mpc.delta: delta not non-decreasing" in validate(spec)


def test_validate_zero_c1():
    g = make_cooling_grid(1, 2)
    spec = MpcSpec(2, 0.05, [0.0, 1.0], 0.0, g.X, g.U)
    assert "mpc.c1: c1 must be positive" in validate(spec)


def test_validate_model_checks(rng):
    b = random_belief(rng)
    X = Polytope.box(-np.ones(2), np.ones(2))
    U = Polytope.box(-np.ones(1), np.ones(1))
    spec = MpcSpec(3, 0.05, 10.0, 0.0, X, U)
    assert validate(spec, b) == []
    bad = GaussianBelief(b.n, b.m, b.masks, b.row_means, b.row_covs, 0.0, b.reward, b.reward_mean, b.reward_cov, 1.0)
    assert any(v.startswith("system.sigma_F") for v in validate(spec, bad))
    convex = RewardModel(np.eye(3), np.zeros(3), b.reward.features, b.reward.learned_weights)
    bad = GaussianBelief(b.n, b.m, b.masks, b.row_means, b.row_covs, 1.0, convex, b.reward_mean, b.reward_cov, 1.0)
    assert any(v.startswith("reward.H") for v in validate(spec, bad))
    wrong = MpcSpec(3, 0.05, 10.0, 0.0, Polytope.box(-np.ones(3), np.ones(3)), U)
    assert any(v.startswith("constraints.X") for v in validate(wrong, b))


def test_cR_sum_of_inputs():
    U = Polytope.box(np.zeros(2), np.ones(2))
    X = Polytope.box(-np.ones(1), np.ones(1))
    reward = _linear_reward(1, 2, [[0.0]], [[1.0, 1.0]], [-1.0])
    assert reward_bound_cR(reward, X, U) == pytest.approx(2.0, abs=1e-9)


def test_cR_zero_reward():
    U = Polytope.box(np.zeros(1), np.ones(1))
    X = Polytope.box(-np.ones(1), np.ones(1))
    reward = _linear_reward(1, 1, np.zeros((0, 1)), np.zeros((0, 1)), np.zeros(0))
    assert reward_bound_cR(reward, X, U) == 0.0


def test_cR_negative_square():
    U = Polytope.box(np.zeros(1), np.ones(1))
    X = Polytope.box(-np.ones(1), np.ones(1))
    H = np.diag([-2.0, 0.0])
    reward = _linear_reward(1, 1, np.zeros((0, 1)), np.zeros((0, 1)), np.zeros(0), H=H)
    assert reward_bound_cR(reward, X, U) == pytest.approx(1.0, abs=1e-9)


def test_cR_needs_operating_box_for_half_space():
    U = Polytope.box(np.zeros(1), np.ones(1))
    X = Polytope.from_halfspaces(np.eye(1), [1.0])
    reward = _linear_reward(1, 1, [[1.0]], [[0.0]], [1.0])
    with pytest.raises(UnboundedSet):
        reward_bound_cR(reward, X, U)
    assert reward_bound_cR(reward, X, U, x_box=(np.array([-3.0]), np.array([5.0]))) == pytest.approx(3.0)


def test_serialization_round_trip(rng):
    b = random_belief(rng)
    again = GaussianBelief.from_dict(b.to_dict())
    for x, y in zip(b.row_covs, again.row_covs):
        np.testing.assert_array_equal(x, y)
    np.testing.assert_array_equal(b.reward.features.Cx, again.reward.features.Cx)
    g = make_cooling_grid(2, 2)
    spec = MpcSpec.from_dict(g.spec.to_dict())
    np.testing.assert_array_equal(spec.delta, g.spec.delta)
    np.testing.assert_array_equal(spec.X.F, g.spec.X.F)


def test_arrays_are_read_only():
    g = make_cooling_grid(1, 1)
    with pytest.raises(ValueError):
        g.spec.delta[0] = 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 30), st.floats(1e-3, 0.5), st.floats(0.0, 0.5))
def test_tightening_schedule_property(T, d0, extra):
    d = tightening_schedule(T, d0, d0 + extra)
    assert d.shape == (T,)
    assert d[0] == pytest.approx(d0)
    assert np.all(np.diff(d) >= -1e-15)
