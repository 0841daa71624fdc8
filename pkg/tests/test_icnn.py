import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from idvae.icnn import (ConvexityConstraintError, IcnnParams, brenier_map, check_convexity, check_monotone,
                        fit_potential, icnn_eval, min_kink_distance, project_convex, project_named)


def test_identity_map_is_exact():
    p = IcnnParams.identity(3)
    u = np.array([[0.3, -1.0, 2.0], [1.0, 1.0, 1.0]])
    np.testing.assert_array_equal(brenier_map(p, u), u)


def test_half_square_norm_without_quadratic_term():
    p = IcnnParams.half_square_norm(4)
    u = np.random.default_rng(1).normal(size=(20, 4))
    np.testing.assert_allclose(icnn_eval(p, u), 0.5 * (u**2).sum(1), rtol=1e-12)
    np.testing.assert_allclose(brenier_map(p, u), u, rtol=1e-12)


def test_negative_weight_rejected_and_projected():
    p = IcnnParams.init(2, (5, 5), rng=0)
    p.W[1][0, 0] = -0.5
    with pytest.raises(ConvexityConstraintError):
        icnn_eval(p, np.zeros(2))
    q = project_convex(p)
    q.validate()
    assert q.W[1][0, 0] == 0.0


def test_nonzero_first_w_rejected():
    p = IcnnParams.init(2, (3,), rng=0)
    p.W[0][0, 0] = 1.0
    with pytest.raises(ConvexityConstraintError, match="W_0"):
        p.validate()


def test_project_named_only_touches_prefix():
    named = {"dec.g1.W1": -np.ones((2, 2)), "enc.W1": -np.ones((2, 2)), "mlp.W2": -np.ones(3)}
    project_named(named)
    assert np.all(named["dec.g1.W1"] == 0)
    assert np.all(named["enc.W1"] == -1) and np.all(named["mlp.W2"] == -1)


def test_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension"):
        icnn_eval(IcnnParams.init(3, (4,), rng=0), np.zeros(2))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), dim=st.integers(1, 4), depth=st.integers(1, 3), quad=st.sampled_from([0.0, 1.0]))
def test_random_networks_are_convex_and_monotone(seed, dim, depth, quad):
    p = IcnnParams.init(dim, (6,) * depth, rng=seed, scale=0.5, quad=quad)
    assert check_convexity(p, 500, rng=seed).ok
    assert check_monotone(p, 500, rng=seed).ok


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = IcnnParams.init(3, (8, 8), rng=rng, scale=0.5, quad=1.0)
    u = rng.normal(size=(1, 3))
    if min_kink_distance(p, u) < 1e-3:
        return
    h = 1e-6
    fd = np.array([(icnn_eval(p, u + h * e) - icnn_eval(p, u - h * e))[0] / (2 * h) for e in np.eye(3)])
    g = brenier_map(p, u)[0]
    assert np.max(np.abs(g - fd)) / max(np.abs(g).max(), 1e-12) < 1e-5


def test_fit_potential_recovers_quadratic():
    params, rms = fit_potential(lambda U: 0.5 * (U**2).sum(1) + U[:, 0], 2, widths=(16,), steps=600, rng=0)
    assert rms < 0.2
    assert check_convexity(params, 1000, rng=0).ok
