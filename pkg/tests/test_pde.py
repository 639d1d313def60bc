import json
import math
from contextlib import nullcontext

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from rfbsde.errors import (
    DimensionError,
    DiscretizationWarning,
    ExtrapolationError,
    GridError,
    StabilityError,
)
from rfbsde.levy import LevyDriver, PointMass
from rfbsde.pde import (
    GridField,
    HJBCoefficients,
    feynman_kac_dirichlet_poisson,
    hjb_generator_eval,
    rbm_transition_backward,
    spde_bridge,
)
from rfbsde.queueing import RBMSpec
from rfbsde.reflection import Domain, ReflectionSpec

AXIS = np.linspace(-2.0, 2.0, 41)


def field_1d(func, times=(0.0,)):
    # q = 1, so component 0 (the total) equals component 1
    return GridField.from_function((AXIS,), times, lambda t, X: np.stack([func(X[0])] * 2))


def test_grid_validation():
    with pytest.raises(GridError):
        GridField((np.array([0.0, 0.1, 0.3]),), [0.0], np.zeros((1, 1, 3)))
    with pytest.raises(GridError):
        GridField((np.array([0.0, 1.0]),), [0.0], np.zeros((1, 1, 2)))
    with pytest.raises(DimensionError):
        GridField((AXIS,), [0.0], np.zeros((1, 1, 40)))


def test_derivatives_exact_on_quadratics():
    ax = np.linspace(0.0, 1.0, 11)
    f = GridField.from_function((ax, ax), [0.0], lambda t, X: (X[0] ** 2 + 3 * X[0] * X[1])[None])
    X = f.mesh()
    g = f.gradient(0)[0]
    np.testing.assert_allclose(g[0], 2 * X[0] + 3 * X[1], atol=1e-10)
    np.testing.assert_allclose(g[1], 3 * X[0], atol=1e-10)
    Hs = f.hessian(0)[0]
    np.testing.assert_allclose(Hs[0, 0], 2.0, atol=1e-8)
    np.testing.assert_allclose(Hs[0, 1], 3.0, atol=1e-8)
    np.testing.assert_allclose(Hs[1, 1], 0.0, atol=1e-8)


def test_interpolation_and_extrapolation():
    f = field_1d(lambda x: 2 * x + 1)
    np.testing.assert_allclose(f.interpolate(0, [[0.33]]), [[1.66, 1.66]])
    with pytest.raises(ExtrapolationError):
        f.interpolate(0, [[2.5]])
    with pytest.warns(DiscretizationWarning):
        np.testing.assert_allclose(f.interpolate(0, [[2.5]], clamp=True), [[5.0, 5.0]])


def test_field_csv(tmp_path):
    f = field_1d(lambda x: x, times=(0.0, 1.0))
    files = f.to_csv(tmp_path)
    assert len(files) >= 2
    meta = json.loads((tmp_path / "field.json").read_text())
    assert meta["times"] == [0.0, 1.0]


def coeffs(**kw):
    return HJBCoefficients(p=1, q=1, d=1, sigma=lambda t, x, u: [[1.0]], **kw)


def test_generator_diffusion_drift_and_cost():
    f = field_1d(lambda x: x**2)
    c = coeffs(b=lambda t, x, u: [3.0], c=lambda t, x, u: [5.0])
    out = hjb_generator_eval(f, c, None, 0.0, [1.0])
    # V'' = 2, b V' = 6, cost 5 for both the total and player 1
    np.testing.assert_allclose(out, [3.0, 3.0], atol=1e-9)
    half = hjb_generator_eval(f, c, None, 0.0, [1.0], half_laplacian=True)
    np.testing.assert_allclose(half, [2.0, 2.0], atol=1e-9)


def test_generator_jump_term():
    lam, m = 2.0, 0.3
    f = field_1d(lambda x: x**2)
    c = HJBCoefficients(p=1, q=1, d=1, driver=LevyDriver(1, (lam,), (PointMass(m),)),
                        eta=lambda t, x, u, z, j: [z])
    out = hjb_generator_eval(f, c, None, 0.0, [0.5])
    # -lam (V(x+m) - V(x) - V'(x) m) = -lam m^2
    np.testing.assert_allclose(out, [-lam * m * m] * 2, atol=1e-9)


def test_generator_cross_and_reflection_terms():
    f = field_1d(lambda x: np.zeros_like(x))
    c = coeffs(alpha=lambda t, x, u, v: [[2.0 * x[0]]],
               beta=lambda t, x: [1.5], s_refl=[[2.0]])
    out = hjb_generator_eval(f, c, None, 0.0, [0.4])
    # d(alpha)/dx * sigma = 2; s * beta = 3
    np.testing.assert_allclose(out, [5.0, 5.0], atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.integers(2, 38))
def test_generator_linear_in_field(a, b, i):
    c = coeffs(b=lambda t, x, u: [0.7])
    f1, f2 = field_1d(np.sin), field_1d(lambda x: x**3)
    both = GridField(f1.axes, f1.times, a * f1.values + b * f2.values)
    x = [AXIS[i]]
    lhs = hjb_generator_eval(both, c, None, 0.0, x)
    rhs = a * hjb_generator_eval(f1, c, None, 0.0, x) + b * hjb_generator_eval(f2, c, None, 0.0, x)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_generator_rejects_off_grid_points():
    with pytest.raises(GridError):
        hjb_generator_eval(field_1d(np.sin), coeffs(), None, 0.0, [0.123])


def test_spde_bridge_components():
    m = 0.25
    f = field_1d(lambda x: x, times=(0.0, 1.0))
    c = HJBCoefficients(p=1, q=1, d=1, driver=LevyDriver(1, (1.0,), (PointMass(m),)),
                        sigma=lambda t, x, u: [[1.0]], eta=lambda t, x, u, z, j: [z])
    times = np.linspace(0, 1, 5)
    out = spde_bridge(f, times, np.linspace(-1, 1, 5)[:, None], c)
    np.testing.assert_allclose(out["V"][:, 1], np.linspace(-1, 1, 5), atol=1e-12)
    np.testing.assert_allclose(out["Vbar"], -1.0, atol=1e-9)
    np.testing.assert_allclose(out["Vtil"], -m, atol=1e-9)


def test_fk_constant_terminal_and_source_sign():
    r = feynman_kac_dirichlet_poisson(lambda X: np.ones(len(X)), [0.3], 1.0, 500, 0.05, seed=0)
    assert r.value == 1.0 and r.se == 0.0
    r = feynman_kac_dirichlet_poisson(lambda X: np.zeros(len(X)), [0.3], 1.0, 500, 0.05, seed=0,
                                      g=1.0)
    assert r.value == pytest.approx(-1.0)
    r = feynman_kac_dirichlet_poisson(lambda X: np.zeros(len(X)), [0.3], 1.0, 500, 0.05, seed=0,
                                      g=1.0, source_sign=1.0)
    assert r.value == pytest.approx(1.0)


@pytest.mark.parametrize("half, var", [(True, 1.0), (False, 2.0)])
def test_fk_free_second_moment(half, var):
    x0 = 0.5
    r = feynman_kac_dirichlet_poisson(lambda X: X[:, 0] ** 2, [x0], 1.0, 40_000, 0.1, seed=3,
                                      half_laplacian=half)
    assert abs(r.value - (x0**2 + var)) < 3 * r.se


def survival(x0, T, dt):
    # discrete monitoring shifts the barrier by about 0.5826 sqrt(dt)
    shift = 0.5826 * math.sqrt(dt)
    return 2 * norm.cdf((x0 + shift) / math.sqrt(T)) - 1


def test_fk_exit_probability_and_step_refinement():
    H = lambda X: np.ones(len(X))
    Hb = lambda X: np.zeros(len(X))
    dom = Domain.orthant(1)
    errs = []
    for dt in (0.04, 0.0025):
        with pytest.warns(DiscretizationWarning) if dt == 0.04 else nullcontext():
            r = feynman_kac_dirichlet_poisson(H, [1.0], 1.0, 20_000, dt, seed=5, domain=dom,
                                              H_boundary=Hb, overshoot_tol=0.5)
        assert abs(r.value - survival(1.0, 1.0, dt)) < 4 * r.se
        errs.append(abs(r.value - survival(1.0, 1.0, 0.0)))
    assert errs[1] < errs[0]


def neumann_rbm(L):
    refl = ReflectionSpec(Domain.hyperbox([L]), np.array([[1.0, -1.0]]))
    return RBMSpec([0.0], [[1.0]], refl, x0=[L / 2])


def test_backward_grid_neumann_mode():
    L = 2.0
    ax = np.linspace(0, L, 101)
    k = math.pi / L
    f = rbm_transition_backward(neumann_rbm(L), lambda X: np.cos(k * X[0]), (ax,), 0.5, 2e-4,
                                half_laplacian=True, store_every=500)
    exact = math.exp(-0.5 * k * k * 0.5) * np.cos(k * ax)
    np.testing.assert_allclose(f.values[0, 0], exact, atol=2e-3)
    assert f.times[0] == 0.0 and f.times[-1] == 0.5


def test_backward_grid_constant_and_stability():
    ax = np.linspace(0, 1, 21)
    rbm = neumann_rbm(1.0)
    f = rbm_transition_backward(rbm, lambda X: np.full(X.shape[1:], 4.0), (ax,), 0.1, 1e-3)
    np.testing.assert_allclose(f.values, 4.0, atol=1e-12)
    with pytest.raises(StabilityError):
        rbm_transition_backward(rbm, lambda X: X[0], (ax,), 0.1, 0.01)
    with pytest.raises(GridError):
        rbm_transition_backward(rbm, lambda X: X[0], (np.linspace(0.1, 1, 10),), 0.1, 1e-3)
