"""Surrogate prox solver: closed-form cases, oracle equivalence, KKT."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pnprecon import prox, recon
from oracles import make_test_problem, penalized_solver, scalar_model


def test_scalar_sqrt2_case():
    # 1 pixel, 1 bin, A=[1], y=2, v=1, rho=1: stationarity -2/x + 1 + (x-1) = 0
    lm = scalar_model(y_value=2.0)
    cfg = prox.ProxConfig(rho=1.0, n_inner=50, tol=0.0)
    x = prox.prox_neg_ll(lm, np.array([[1.0]]), cfg, np.array([[1.0]]))
    assert x[0, 0] == pytest.approx(np.sqrt(2.0), rel=1e-13)
    assert prox.kkt_residual(lm, np.array([[1.0]]), 1.0, x) < 1e-10


def test_zero_counts_give_clipped_quadratic_solution():
    _, lm = make_test_problem(grid=16, seed=1)
    lm0 = recon.LikelihoodModel(model=lm.model, y=np.zeros_like(lm.y))
    rng = np.random.default_rng(2)
    v = rng.normal(0.2, 0.5, (16, 16))
    rho = 7.0
    cfg = prox.ProxConfig(rho=rho, n_inner=5, tol=0.0)
    x = prox.prox_neg_ll(lm0, v, cfg, np.ones((16, 16)))
    sens = lm.sensitivity
    want = np.maximum(0.0, v - sens / rho)
    want[~lm.mask] = 0.0
    np.testing.assert_allclose(x, want, rtol=1e-13, atol=1e-15)


def test_matches_projected_gradient_oracle():
    for seed in (3, 4, 5):
        _, lm = make_test_problem(grid=16, seed=seed)
        rng = np.random.default_rng(seed)
        scale = float(np.mean(lm.sensitivity[lm.mask]))
        rho = scale * rng.uniform(1.0, 3.0)
        activity, _ = make_test_problem(grid=16, seed=seed)
        v = activity + rng.normal(0.0, 0.3, activity.shape)
        want = penalized_solver(lm, v, rho, kkt_target=1e-10)
        cfg = prox.ProxConfig(rho=rho, n_inner=20000, tol=0.0)
        x = prox.prox_neg_ll(lm, v, cfg, np.ones_like(v))
        assert prox.kkt_residual(lm, v, rho, x) < 1e-8
        assert np.max(np.abs(x - want)) < 1e-6


def test_subproblem_objective_at_v_is_negative_ll():
    activity, lm = make_test_problem(grid=16, seed=6)
    v = activity + 0.2
    got = prox.subproblem_objective(lm, v, 3.0, v)
    assert got == pytest.approx(-recon.log_likelihood(lm, v), rel=1e-14)


def test_subproblem_objective_rho_zero_is_negative_ll():
    activity, lm = make_test_problem(grid=16, seed=6)
    x = activity + 0.1
    got = prox.subproblem_objective(lm, np.zeros_like(x), 0.0, x)
    assert got == pytest.approx(-recon.log_likelihood(lm, x), rel=1e-14)


def test_subproblem_objective_compositional_oracle():
    activity, lm = make_test_problem(grid=16, seed=7)
    rng = np.random.default_rng(1)
    v = rng.normal(0.5, 0.4, activity.shape)
    x = np.abs(rng.normal(0.5, 0.4, activity.shape))
    rho = 2.5
    mask = lm.mask
    want = (-recon.log_likelihood(lm, x)
            + 0.5 * rho * float(np.sum((x[mask] - v[mask]) ** 2)))
    got = prox.subproblem_objective(lm, v, rho, x)
    assert got == pytest.approx(want, rel=1e-12)


def test_objective_monotone_along_surrogate_iterations():
    _, lm = make_test_problem(grid=16, seed=8)
    rng = np.random.default_rng(3)
    v = rng.normal(0.3, 0.5, (16, 16))
    rho = 5.0
    objs = []
    cfg = prox.ProxConfig(rho=rho, n_inner=60, tol=0.0)
    prox.prox_neg_ll(lm, v, cfg, np.ones((16, 16)),
                     callback=lambda it, x: objs.append(
                         prox.subproblem_objective(lm, v, rho, x)))
    objs = np.array(objs)
    assert np.all(objs[1:] <= objs[:-1] + 1e-10 * np.abs(objs[:-1]))


def test_kkt_decreases_along_iterations():
    _, lm = make_test_problem(grid=16, seed=9)
    rng = np.random.default_rng(4)
    v = rng.normal(0.3, 0.5, (16, 16))
    rho = 30.0
    kkts = []
    cfg = prox.ProxConfig(rho=rho, n_inner=200, tol=0.0)
    prox.prox_neg_ll(lm, v, cfg, np.ones((16, 16)),
                     callback=lambda it, x: kkts.append(
                         prox.kkt_residual(lm, v, rho, x)))
    assert kkts[-1] < kkts[0] * 1e-3


def test_kkt_positive_away_from_optimum():
    _, lm = make_test_problem(grid=16, seed=9)
    v = np.full((16, 16), 0.5)
    assert prox.kkt_residual(lm, v, 5.0, np.full((16, 16), 10.0)) > 1.0


def test_rho_zero_rejected_by_config():
    with pytest.raises(ValueError, match="rho"):
        prox.ProxConfig(rho=0.0)
    with pytest.raises(ValueError, match="rho"):
        prox.ProxConfig(rho=-1.0)


def test_surrogate_root_rho_zero_is_em_update_bitwise():
    _, lm = make_test_problem(grid=16, seed=10)
    x = recon.uniform_start(lm.model)
    for _ in range(3):
        x = recon.mlem_step(lm, x)
    sens = lm.sensitivity.ravel()
    mask = lm.mask.ravel()
    num = recon._em_ratio_backproj(lm, x).ravel()
    b = x.ravel() * num
    em = recon.mlem_step(lm, x).ravel()
    root = prox.surrogate_root(sens[mask], b[mask], np.zeros(mask.sum()), 0.0)
    np.testing.assert_array_equal(root, em[mask])


@settings(max_examples=200, deadline=None)
@given(s=st.floats(0.0, 1e6), b=st.floats(0.0, 1e6),
       v=st.floats(-1e6, 1e6), rho=st.floats(1e-9, 1e6))
def test_surrogate_root_nonnegative(s, b, v, rho):
    root = prox.surrogate_root(np.array([s]), np.array([b]),
                               np.array([v]), rho)[0]
    assert root >= 0.0
    assert np.isfinite(root)


@settings(max_examples=100, deadline=None)
@given(s=st.floats(1e-3, 1e3), b=st.floats(1e-6, 1e3), v=st.floats(-1e3, 1e3),
       rho=st.floats(1e-3, 1e3))
def test_surrogate_root_solves_quadratic(s, b, v, rho):
    x = prox.surrogate_root(np.array([s]), np.array([b]), np.array([v]), rho)[0]
    # rho x^2 + (s - rho v) x - b = 0 at the returned root
    resid = rho * x * x + (s - rho * v) * x - b
    scale = max(rho * x * x, abs(s - rho * v) * x, b, 1e-12)
    assert abs(resid) / scale < 1e-9


def test_prox_accepts_negative_v():
    _, lm = make_test_problem(grid=16, seed=11)
    v = np.full((16, 16), -2.0)
    cfg = prox.ProxConfig(rho=50.0, n_inner=100, tol=1e-12)
    x = prox.prox_neg_ll(lm, v, cfg, np.ones((16, 16)))
    assert np.all(x >= 0.0)
    assert np.all(np.isfinite(x))
