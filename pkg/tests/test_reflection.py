import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import linprog

from rfbsde.errors import (
    ConvergenceError,
    DimensionError,
    InfeasibleLCPError,
    ParameterError,
)
from rfbsde.reflection import (
    Domain,
    ReflectionSpec,
    check_oscillation_inequality,
    estimate_kappa,
    is_completely_s,
    is_s_matrix,
    modulus_of_continuity,
    oscillation,
    random_path,
    skorokhod_fixed_point,
    skorokhod_solve,
    skorokhod_solve_batch,
    solve_jump_lcp,
    spec_from_dict,
    spectral_radius,
    spectral_radius_condition,
)


def lp_margin(M):
    """Independent S-matrix oracle: max t with M x >= t, x >= 0, sum x <= 1."""
    k = M.shape[0]
    c = np.zeros(k + 1)
    c[-1] = -1.0
    A = np.vstack([np.hstack([-M, np.ones((k, 1))]), np.r_[np.ones(k), 0.0]])
    b = np.r_[np.zeros(k), 1.0]
    res = linprog(c, A_ub=A, b_ub=b, bounds=[(0, None)] * k + [(None, 1)], method="highs")
    return -res.fun


# ---------------------------------------------------------------- S matrices

@pytest.mark.parametrize(
    "M, expected",
    [
        ([[1, 0], [0, 1]], True),
        ([[1, -1], [-1, 1]], False),
        ([[1, 2], [-1, 1]], True),
        ([[1, 2], [-1, 0]], False),
        ([[0]], False),
        ([[-1, 0], [0, 1]], False),
        ([[2, -1], [-1, 2]], True),
    ],
)
def test_s_matrix_examples(M, expected):
    ok, w = is_s_matrix(M)
    assert ok is expected
    if ok:
        assert np.all(w > 0) and np.all(np.asarray(M, float) @ w > 0)


def test_s_matrix_rejects_bad_shape():
    with pytest.raises(DimensionError):
        is_s_matrix(np.ones((2, 3)))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 3), elements=st.integers(-3, 3).map(float)))
def test_s_matrix_matches_lp_margin(M):
    ok, _ = is_s_matrix(M)
    assert ok == (lp_margin(M) > 1e-9)


def test_completely_s_count_2x2():
    # [DERIVED] only [[1,-1],[-1,1]] fails among unit-diagonal {-1,0,1} matrices
    count = sum(
        is_completely_s(ReflectionSpec.orthant(np.array(e, float).reshape(2, 2)))[0]
        for e in itertools.product((-1, 0, 1), repeat=4)
    )
    assert count == 8


def test_certificate_witnesses_are_valid():
    spec = ReflectionSpec.orthant([[1, 0.5, 0], [-0.3, 1, 0.2], [0, -0.4, 1]])
    ok, cert = spec.certificate
    assert ok
    assert len(cert) == 7
    for J, w in cert.items():
        sub = spec.NR[np.ix_(J, J)]
        assert np.all(w > 0) and np.all(sub @ w > 0)


def test_completely_s_reports_failed_block():
    ok, cert = is_completely_s(ReflectionSpec.orthant([[1, -1], [-1, 1]]))
    assert not ok and cert["failed"] == (0, 1)


def test_hyperbox_admissible_and_corner_sets():
    dom = Domain.hyperbox([1.0, 2.0])
    assert dom.n_faces == 4
    assert (0, 2) not in dom.admissible_sets
    assert len(dom.admissible_sets) == 4 + 4
    assert set(dom.corner_sets) == {(0, 1), (0, 3), (1, 2), (2, 3)}


def test_domain_slack_and_faces():
    dom = Domain.hyperbox([1.0, 2.0])
    np.testing.assert_allclose(dom.slack([0.25, 2.0]), [0.25, 2.0, 0.75, 0.0])
    assert dom.on_face(np.array([0.25, 2.0])).tolist() == [False, False, False, True]
    assert dom.contains([0.5, 0.5]) and not dom.contains([1.5, 0.5])
    assert dom.opposite(0) == 2 and Domain.orthant(2).opposite(0) is None


def test_domain_validation():
    with pytest.raises(ParameterError):
        Domain.hyperbox([1.0, -1.0])
    with pytest.raises(ParameterError):
        Domain("ball", 2)
    with pytest.raises(DimensionError):
        ReflectionSpec(Domain.orthant(2), np.eye(3))


# ---------------------------------------------------------------- spectral condition

def test_spectral_radius_matches_eig():
    rng = np.random.default_rng(3)
    for _ in range(20):
        Q = rng.random((4, 4))
        assert spectral_radius(Q) == pytest.approx(np.max(np.abs(np.linalg.eigvals(Q))), rel=1e-8)


def test_spectral_condition_examples():
    assert spectral_radius_condition(ReflectionSpec.orthant([[1, 0], [-0.5, 1]]))
    assert not spectral_radius_condition(ReflectionSpec.orthant([[1, -1], [-1, 1]]))
    # unit-diagonal scaling: [[2, -1], [-1, 2]] becomes off-diagonal 1/2
    assert spectral_radius_condition(ReflectionSpec.orthant([[2, -1], [-1, 2]]))


# ---------------------------------------------------------------- jump LCP

def test_jump_lcp_oblique_example():
    spec = ReflectionSpec.orthant([[1, 0], [-0.5, 1]])
    res = solve_jump_lcp([0.0, 0.0], [-1.0, 0.0], spec)
    np.testing.assert_allclose(res.dy, [1.0, 0.5])
    np.testing.assert_allclose(res.dx, [0.0, 0.0], atol=1e-15)
    assert res.unique
    # [DERIVED] ||A^-1||_2 for [[1,0],[-0.5,1]]
    assert res.C == pytest.approx(np.linalg.norm(np.linalg.inv(spec.NR), 2))


def test_jump_lcp_partial_push():
    res = solve_jump_lcp([0.5, 0.5], [-1.0, 2.0], ReflectionSpec.orthant(np.eye(2)))
    np.testing.assert_allclose(res.dy, [0.5, 0.0])
    assert res.active == (0,)


def test_jump_lcp_infeasible():
    spec = ReflectionSpec.orthant([[1, 0], [0, -1]])
    with pytest.raises(InfeasibleLCPError):
        solve_jump_lcp([0.0, 0.0], [0.0, -1.0], spec)


@settings(max_examples=80, deadline=None)
@given(
    arrays(np.float64, (2, 2), elements=st.floats(-0.6, 0.6)),
    arrays(np.float64, 2, elements=st.floats(-3, 3)),
)
def test_lcp_solution_is_complementary_and_bounded(off, dz):
    R = np.eye(2) + off * (1 - np.eye(2))
    spec = ReflectionSpec.orthant(R)
    if not spec.completely_s:
        return
    res = solve_jump_lcp([0.0, 0.0], dz, spec)
    x = res.dx
    assert np.all(res.dy >= 0)
    assert np.all(x >= -1e-12)
    assert np.all(np.abs(res.dy * x) <= 1e-12 * (1 + np.abs(dz).max()))
    # ||dx|| <= (1 + ||R|| C) ||dz||
    bound = (1 + np.linalg.norm(R, 2) * spec.lcp_constant) * np.linalg.norm(dz)
    assert np.linalg.norm(x) <= bound + 1e-12


# ---------------------------------------------------------------- Skorohod maps

def test_linear_path_gives_linear_regulator():
    spec = ReflectionSpec.orthant([[1.0]])
    t = np.linspace(0, 1, 11)
    reg = skorokhod_solve(-t, spec, t)
    np.testing.assert_array_equal(reg.x[:, 0], 0.0)
    np.testing.assert_allclose(reg.y[:, 0], t)
    assert reg.check(spec)["ok"]


def test_one_dim_closed_form_random():
    spec = ReflectionSpec.orthant([[1.0]])
    rng = np.random.default_rng(0)
    for _ in range(10):
        z = random_path(spec.domain, 200, rng)[:, 0]
        reg = skorokhod_solve(z, spec)
        expected = np.maximum.accumulate(np.maximum(-z, 0.0))
        np.testing.assert_allclose(reg.y[:, 0], expected, atol=1e-12, rtol=0)


def test_start_outside_domain_rejected():
    with pytest.raises(ParameterError):
        skorokhod_solve([-0.1, 0.0], ReflectionSpec.orthant([[1.0]]))


def test_non_completely_s_rejected():
    spec = ReflectionSpec.orthant([[1, -1], [-1, 1]])
    with pytest.raises(InfeasibleLCPError):
        skorokhod_solve(np.zeros((3, 2)), spec)


def test_hyperbox_path_invariants():
    spec = ReflectionSpec(Domain.hyperbox([1.0, 1.0]),
                          np.array([[1, -0.3, -1, 0.2], [0.2, 1, 0.1, -1]]))
    rng = np.random.default_rng(5)
    for _ in range(5):
        z = random_path(spec.domain, 100, rng)
        reg = skorokhod_solve(z, spec)
        rep = reg.check(spec)
        assert rep["ok"], rep


def test_batch_matches_sequential():
    spec = ReflectionSpec.orthant([[1, 0.3], [-0.4, 1]])
    rng = np.random.default_rng(2)
    zs = np.stack([random_path(spec.domain, 50, rng) for _ in range(6)])
    X, Y = skorokhod_solve_batch(zs, spec)
    for i in range(6):
        reg = skorokhod_solve(zs[i], spec)
        np.testing.assert_allclose(X[i], reg.x, atol=1e-13)
        np.testing.assert_allclose(Y[i], reg.y, atol=1e-13)


def test_batch_diagonal_fast_path():
    spec = ReflectionSpec.orthant(np.diag([1.0, 2.0]))
    rng = np.random.default_rng(9)
    zs = np.stack([random_path(spec.domain, 30, rng) for _ in range(3)])
    X, Y = skorokhod_solve_batch(zs, spec)
    for i in range(3):
        reg = skorokhod_solve(zs[i], spec)
        np.testing.assert_allclose(Y[i], reg.y, atol=1e-13)


def test_fixed_point_agrees_with_lcp():
    spec = ReflectionSpec.orthant([[1, 0.3, 0], [-0.2, 1, 0.3], [0.1, -0.3, 1]])
    rng = np.random.default_rng(4)
    for _ in range(5):
        z = random_path(spec.domain, 60, rng)
        a = skorokhod_solve(z, spec)
        b = skorokhod_fixed_point(z, spec)
        assert np.max(np.abs(a.x - b.x)) <= 1e-8
        assert np.max(np.abs(a.y - b.y)) <= 1e-8


def test_fixed_point_refuses_without_contraction():
    spec = ReflectionSpec.orthant([[1, 1.5], [1.5, 1]])
    assert spec.completely_s and not spec.spectral_ok
    with pytest.raises(ConvergenceError):
        skorokhod_fixed_point(np.zeros((3, 2)), spec)


def test_regulated_path_csv_roundtrip(tmp_path):
    from rfbsde._io import read_csv

    spec = ReflectionSpec.orthant([[1.0]])
    t = np.linspace(0, 1, 5)
    reg = skorokhod_solve(-t, spec, t)
    header, data = read_csv(reg.to_csv(tmp_path / "p.csv"))
    assert header == ["t", "x_1", "y_1"]
    np.testing.assert_array_equal(data[:, 2], reg.y[:, 0])


def test_spec_from_dict_flat_and_nested():
    a = spec_from_dict({"domain": {"kind": "hyperbox", "upper": [1, 2]},
                        "R": [1, 0, -1, 0, 0, 1, 0, -1]})
    b = spec_from_dict(a.to_dict())
    np.testing.assert_array_equal(a.R, b.R)
    assert b.domain == a.domain


# ---------------------------------------------------------------- oscillation

def test_oscillation_and_modulus():
    t = np.linspace(0, 1, 11)
    assert oscillation(t, t) == pytest.approx(1.0)
    assert oscillation(t, t, 0.2, 0.5) == pytest.approx(0.3)
    # [DERIVED] linear path: best partition has cells of length 0.5
    assert modulus_of_continuity(t, t, 0.4) == pytest.approx(0.5)
    step = (t >= 0.5).astype(float)
    assert modulus_of_continuity(step, t, 0.4) == 0.0
    with pytest.raises(ParameterError):
        modulus_of_continuity(t, t, 1.5)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=25), st.floats(0.05, 0.9))
def test_oscillation_monotone_in_window(vals, frac):
    v = np.asarray(vals)
    t = np.linspace(0, 1, v.size)
    assert oscillation(v, t, 0, frac) <= oscillation(v, t) + 1e-15
    m1 = modulus_of_continuity(v, t, frac * 0.5)
    m2 = modulus_of_continuity(v, t, frac)
    assert m1 <= m2 + 1e-15


def test_one_dim_kappa_bound():
    spec = ReflectionSpec.orthant([[1.0]])
    kappa = estimate_kappa(spec, trials=40, seed=1)
    # in one dimension Osc(x) and Osc(y) never exceed Osc(z)
    assert kappa <= 1.5 + 1e-12
    rng = np.random.default_rng(11)
    for _ in range(20):
        reg = skorokhod_solve(random_path(spec.domain, 40, rng), spec)
        assert check_oscillation_inequality(reg, 1.0)["ok"]


def test_estimate_kappa_validation():
    with pytest.raises(ParameterError):
        estimate_kappa(ReflectionSpec.orthant([[1.0]]), trials=0, seed=0)
