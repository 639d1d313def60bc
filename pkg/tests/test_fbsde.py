import math
import warnings
from dataclasses import replace

import numpy as np
import pytest

from rfbsde.errors import (
    CoefficientError,
    DimensionError,
    DivergenceWarning,
    GridError,
    ParameterError,
)
from rfbsde.fbsde import (
    CoefficientSet,
    EnsembleSolution,
    FBSDEProblem,
    Regressor,
    SolverConfig,
    default_gamma,
    linear_coefficients,
    picard_iterate,
    problem_from_dict,
    simulate_forward,
    solve_backward_lsmc,
    validate_solution,
    weighted_norm,
    xi_weight,
)
from rfbsde.levy import Exponential, LevyDriver, sample_ensemble
from rfbsde.reflection import BOUNDARY_TOL, ReflectionSpec


def binomial_stopping_oracle(T, n):
    """max(0, .)-reflected recursion for H = max(x, 0), c = -1/2 on a binomial tree."""
    h = math.sqrt(T / n)
    x = np.arange(-n, n + 1) * h
    V = np.maximum(x, 0.0)
    for _ in range(n):
        V = np.maximum(0.5 * (V[2:] + V[:-2]) - 0.5 * T / n, 0.0)
    return float(V[0])


def linear_bsde(rate=0.1):
    co = linear_coefficients(1, 1, 1, sigma=[[1.0]], cv=[[rate]], H0=[1.0], L=1.0)
    return FBSDEProblem(co, LevyDriver(1), 1.0, [0.0])


def test_linear_bsde_exponential_growth():
    prob = linear_bsde(0.2)
    sol, diag = picard_iterate(prob, SolverConfig(n_paths=500, n_steps=50, max_iter=3))
    # explicit scheme gives (1 + r dt)^M exactly for a deterministic recursion
    assert sol.V0[0] == pytest.approx((1 + 0.2 / 50) ** 50, rel=1e-12)
    assert abs(sol.V0[0] - math.exp(0.2)) < 3 * 0.2 * math.exp(0.2) * 0.2 / 50 + 1e-3
    assert diag.converged


def test_step_doubling_error_estimate():
    prob = linear_bsde(0.1)
    sol, _ = picard_iterate(prob, SolverConfig(n_paths=200, n_steps=100, max_iter=2,
                                               step_doubling=True))
    fine, coarse = (1 + 0.1 / 100) ** 100, (1 + 0.1 / 50) ** 50
    assert sol.disc_err[0] == pytest.approx(abs(fine - coarse), rel=1e-9)
    assert abs(sol.V0[0] - math.exp(0.1)) <= 3 * sol.error()[0]
    with pytest.raises(GridError):
        picard_iterate(prob, SolverConfig(n_paths=10, n_steps=5, step_doubling=True))


def test_martingale_representation():
    co = linear_coefficients(1, 1, 1, sigma=[[1.0]], G=[[1.0]], L=1.0)
    prob = FBSDEProblem(co, LevyDriver(1), 1.0, [0.0])
    sol, _ = picard_iterate(prob, SolverConfig(n_paths=4000, n_steps=20, max_iter=2, seed=3))
    assert abs(sol.V0[0]) < 4 * sol.V0_se[0] + 1e-12
    # V = W, so the Brownian loading is one
    assert sol.Vbar[:, :-1, 0, 0].mean() == pytest.approx(1.0, abs=0.05)
    assert validate_solution(sol, prob)["ok"]


def test_jump_loading_recovered():
    drv = LevyDriver(1, (2.0,), (Exponential(0.5),))
    co = linear_coefficients(1, 1, 1, 1, sigma=[[1.0]], eta=[[1.0]], G=[[1.0]], L=1.0)
    prob = FBSDEProblem(co, drv, 1.0, [0.0])
    sol, _ = picard_iterate(prob, SolverConfig(n_paths=4000, n_steps=20, max_iter=2, seed=1))
    # V = X = W + compensated jump sum: both loadings equal one
    assert sol.Vtil[:, :-1, 0, 0].mean() == pytest.approx(1.0, abs=0.1)
    assert abs(sol.V0[0]) < 4 * sol.V0_se[0] + 1e-12


def test_backward_reflection_against_tree():
    co = replace(linear_coefficients(1, 1, 1, sigma=[[1.0]], c0=[-0.5], L=1.0),
                 H=lambda x: np.maximum(x, 0.0))
    prob = FBSDEProblem(co, LevyDriver(1), 1.0, [0.0], backward=ReflectionSpec.orthant([[1.0]]))
    sol, _ = picard_iterate(prob, SolverConfig(n_paths=20_000, n_steps=50, max_iter=2))
    # [DERIVED] binomial oracle with the same 50 exercise dates: 0.032653061946641415
    oracle = binomial_stopping_oracle(1.0, 50)
    assert oracle == pytest.approx(0.032653061946641415, rel=1e-12)
    # cubic regression of a kinked value carries a small low bias
    assert abs(sol.V0[0] - oracle) < 2.5e-3
    rep = validate_solution(sol, prob)
    assert rep["ok"], rep
    assert rep["F_complementarity"] == [0.0]
    assert np.all(sol.V >= 0)
    assert sol.F[:, -1].mean() > 0


def test_reflected_forward_stationary_mean():
    co = linear_coefficients(1, 1, 1, b0=[-0.5], sigma=[[1.0]], L=1.0)
    prob = FBSDEProblem(co, LevyDriver(1), 20.0, [1.0], forward=ReflectionSpec.orthant([[1.0]]))
    drv = sample_ensemble(prob.driver, np.linspace(0, 20, 4001), 500, seed=2)
    fwd = simulate_forward(prob, drv)
    # stationary law is exponential with mean sigma^2 / (2 |theta|) = 1
    assert fwd.X[:, 2000:].mean() == pytest.approx(1.0, rel=0.1)
    # X = Z + R Y is kept exact, so faces are reached up to rounding only
    assert fwd.X.min() >= -BOUNDARY_TOL
    np.testing.assert_array_equal(fwd.X, fwd.Z + fwd.Y)


def test_path_order_invariance():
    prob = linear_bsde(0.1)
    prob = replace(prob, coefficients=replace(prob.coefficients, H=lambda x: np.sin(x)))
    times = np.linspace(0, 1, 21)
    ids = np.arange(300)
    a = sample_ensemble(prob.driver, times, 300, seed=5, path_ids=ids)
    b = sample_ensemble(prob.driver, times, 300, seed=5, path_ids=ids[::-1])
    fa = solve_backward_lsmc(prob, simulate_forward(prob, a), a)
    fb = solve_backward_lsmc(prob, simulate_forward(prob, b), b)
    assert fa.V0[0] == pytest.approx(fb.V0[0], abs=1e-12)


def test_picard_contraction_and_divergence():
    co = linear_coefficients(1, 1, 1, bv=[[0.1]], sigma=[[1.0]], cx=[[0.1]], G=[[1.0]], L=1.0)
    prob = FBSDEProblem(co, LevyDriver(1), 0.5, [0.0])
    _, diag = picard_iterate(prob, SolverConfig(n_paths=500, n_steps=20, max_iter=6, tol=0.0))
    assert all(r < 1 for r in diag.ratios)
    assert not diag.diverged
    stress = linear_coefficients(1, 1, 1, bv=[[50.0]], sigma=[[1.0]], cx=[[50.0]], G=[[1.0]],
                                 L=50.0)
    prob = FBSDEProblem(stress, LevyDriver(1), 1.0, [0.0])
    with pytest.warns(DivergenceWarning):
        _, diag = picard_iterate(prob, SolverConfig(n_paths=200, n_steps=20, max_iter=10))
    assert diag.diverged


def test_weighted_norm_properties():
    prob = linear_bsde(0.1)
    sol, _ = picard_iterate(prob, SolverConfig(n_paths=100, n_steps=10, max_iter=2, seed=1))
    assert weighted_norm(sol, sol, 0.5) == 0.0
    assert weighted_norm(sol, None, 0.5) > weighted_norm(sol, None, 0.0) > 0
    other, _ = picard_iterate(prob, SolverConfig(n_paths=100, n_steps=10, max_iter=2, seed=2))
    with pytest.raises(GridError):
        weighted_norm(sol, other, 0.5)
    assert default_gamma(prob, sol.times) == pytest.approx(0.5)
    assert xi_weight(1, 1.0) == pytest.approx(1 / (1 * 1 * math.e))
    assert xi_weight(2, 2.0) < xi_weight(1, 2.0)


def test_truncated_norm_adds_derivative_terms():
    co = linear_coefficients(1, 1, 1, sigma=[[1.0]], G=[[1.0]], L=1.0)
    co = replace(co, H=lambda x: x**2)
    prob = FBSDEProblem(co, LevyDriver(1), 1.0, [0.0])
    sol, _ = picard_iterate(prob, SolverConfig(n_paths=300, n_steps=10, max_iter=2))
    base = weighted_norm(sol, None, 0.5)
    assert weighted_norm(sol, None, 0.5, truncation_order=1) > base


def test_coefficient_errors():
    bad = CoefficientSet(1, 1, 1, c=lambda t, x, v, vb, vt, u: np.full((x.shape[0], 1), np.nan))
    prob = FBSDEProblem(bad, LevyDriver(1), 1.0, [0.0])
    with pytest.raises(CoefficientError):
        picard_iterate(prob, SolverConfig(n_paths=10, n_steps=4))
    wrong = CoefficientSet(1, 1, 1, b=lambda t, x, v, vb, vt, u: np.zeros((x.shape[0], 3)))
    prob = FBSDEProblem(wrong, LevyDriver(1), 1.0, [0.0])
    with pytest.raises(DimensionError):
        picard_iterate(prob, SolverConfig(n_paths=10, n_steps=4))


def test_problem_validation():
    co = linear_coefficients(1, 1, 1)
    with pytest.raises(DimensionError):
        FBSDEProblem(co, LevyDriver(2), 1.0, [0.0])
    with pytest.raises(ParameterError):
        FBSDEProblem(co, LevyDriver(1), 0.0, [0.0])
    with pytest.raises(ParameterError):
        FBSDEProblem(co, LevyDriver(1), 1.0, [-1.0], forward=ReflectionSpec.orthant([[1.0]]))
    with pytest.raises(ParameterError):
        SolverConfig(n_paths=0)


def test_validate_flags_tampering():
    prob = linear_bsde(0.1)
    sol, _ = picard_iterate(prob, SolverConfig(n_paths=50, n_steps=10, max_iter=2))
    assert validate_solution(sol, prob)["ok"]
    V = sol.V.copy()
    V[:, -1] += 1e-9
    rep = validate_solution(replace(sol, V=V), prob)
    assert not rep["ok"] and "terminal residual nonzero" in rep["violations"]


def test_save_load_roundtrip(tmp_path):
    prob = linear_bsde(0.1)
    sol, _ = picard_iterate(prob, SolverConfig(n_paths=20, n_steps=4, max_iter=2, seed=9))
    sol.save(tmp_path / "s.npz")
    back = EnsembleSolution.load(tmp_path / "s.npz")
    np.testing.assert_array_equal(back.V, sol.V)
    assert back.seed == 9


def test_regressor_recovers_polynomial():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(500, 2))
    y = 1 + X[:, 0] - 2 * X[:, 0] * X[:, 1] + X[:, 1] ** 3
    reg = Regressor(3)
    fitted = reg.fit(X, y[:, None])
    np.testing.assert_allclose(fitted[:, 0], y, atol=1e-9)
    np.testing.assert_allclose(reg.predict(X[:5])[:, 0], y[:5], atol=1e-9)


def test_problem_from_dict():
    cfg = {"p": 1, "q": 1, "T": 1.0, "x0": [0.0], "driver": {"d": 1},
           "coefficients": {"sigma": [[1.0]], "cv": [[0.1]],
                            "H": {"kind": "constant", "value": [1.0]}},
           "backward": {"domain": {"kind": "orthant", "p": 1}, "R": [[1.0]]}}
    prob = problem_from_dict(cfg)
    assert prob.backward is not None and prob.forward is None
    np.testing.assert_array_equal(prob.coefficients.H(np.zeros((3, 1))), np.ones((3, 1)))
    with pytest.raises(ParameterError):
        problem_from_dict({**cfg, "coefficients": {"H": {"kind": "cubic"}}})
