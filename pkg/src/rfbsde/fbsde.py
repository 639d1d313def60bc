"""Coupled reflected forward-backward SDEs on a time grid.

Forward block (reflected Euler with jump superposition)::

    X_{k+1} = X_k + b dt + sigma dW + eta dN~  +  R dY_{k+1}

Backward block (least-squares Monte Carlo, explicit driver)::

    V_M = H(X_M)
    V_k = E[V_{k+1} | X_k] + dt c(t_k, X_k, E[V_{k+1} | X_k], Vbar_k, Vtil_k, u_k)  +  S dF_k

Vbar is the regression estimate of E[V_{k+1} dW' | X_k] / dt and Vtil the
per-unit-mark covariation E[V_{k+1} dN~_j | X_k] / (lam_j dt E[z_j^2]).

Coefficients are vectorized over paths: ``x`` is (n, p), ``v`` (n, q),
``vbar`` (n, q, d), ``vtil`` (n, q, h) and ``u`` whatever the control map
returns.  Jump coefficients are loadings on the mark: ``eta`` returns
(n, p, h) and the jump of X from a mark z on component j is eta[:, :, j] * z.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import (
    CoefficientError,
    ConvergenceError,
    DimensionError,
    DivergenceWarning,
    GridError,
    InfeasibleLCPError,
    ParameterError,
    RegressionRankWarning,
)
from .levy import DriverEnsemble, LevyDriver, PathGrid, sample_ensemble
from .reflection import BOUNDARY_TOL, ReflectionSpec, _lcp_batch, apply_reflection


def _zero(shape_fn):
    def f(t, x, v, vbar, vtil, u):
        return np.zeros(shape_fn(x.shape[0]))

    return f


@dataclass(frozen=True)
class CoefficientSet:
    p: int
    q: int
    d: int
    h: int = 0
    b: Callable | None = None
    sigma: Callable | None = None
    eta: Callable | None = None
    c: Callable | None = None
    alpha: Callable | None = None
    zeta: Callable | None = None
    H: Callable | None = None
    L: float | Callable = 1.0
    control: Callable | None = None

    def __post_init__(self):
        p, q, d, h = self.p, self.q, self.d, self.h
        defaults = {
            "b": _zero(lambda n: (n, p)),
            "sigma": _zero(lambda n: (n, p, d)),
            "eta": _zero(lambda n: (n, p, h)),
            "c": _zero(lambda n: (n, q)),
            "alpha": lambda t, x, v, vbar, vtil, u: vbar,
            "zeta": lambda t, x, v, vbar, vtil, u: vtil,
            "H": lambda x: np.zeros((x.shape[0], q)),
        }
        for name, fn in defaults.items():
            if getattr(self, name) is None:
                object.__setattr__(self, name, fn)

    def lipschitz(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if callable(self.L):
            return np.broadcast_to(np.asarray(self.L(t), dtype=float), t.shape)
        return np.full(t.shape, float(self.L))

    def controls(self, t, x):
        return None if self.control is None else self.control(t, x)

    def evaluate(self, name, t, x, v, vbar, vtil, u, shape):
        try:
            out = np.asarray(getattr(self, name)(t, x, v, vbar, vtil, u), dtype=float)
        except Exception as exc:  # noqa: BLE001 - user callables may raise anything
            raise CoefficientError(f"coefficient {name} failed at t={t}: {exc}") from exc
        try:
            out = np.broadcast_to(out, shape)
        except ValueError as exc:
            raise DimensionError(f"coefficient {name} returned shape {out.shape}, "
                                 f"expected {shape}") from exc
        if not np.all(np.isfinite(out)):
            raise CoefficientError(f"coefficient {name} is not finite at t={t}")
        return out


@dataclass(frozen=True, eq=False)
class FBSDEProblem:
    coefficients: CoefficientSet
    driver: LevyDriver
    T: float
    x0: np.ndarray
    forward: ReflectionSpec | None = None
    backward: ReflectionSpec | None = None

    def __post_init__(self):
        co = self.coefficients
        x0 = np.asarray(self.x0, dtype=float).reshape(co.p)
        object.__setattr__(self, "x0", x0)
        if not self.T > 0:
            raise ParameterError("horizon T must be positive")
        if self.driver.d != co.d or self.driver.h != co.h:
            raise DimensionError("driver dimensions do not match the coefficients")
        if self.forward is not None:
            if self.forward.p != co.p:
                raise DimensionError("forward reflection dimension differs from p")
            if not self.forward.domain.contains(x0, tol=0.0):
                raise ParameterError("initial state lies outside the forward domain")
        if self.backward is not None and self.backward.p != co.q:
            raise DimensionError("backward reflection dimension differs from q")


@dataclass(frozen=True, eq=False)
class ForwardPaths:
    times: np.ndarray
    X: np.ndarray  # (n, M+1, p)
    Y: np.ndarray  # (n, M+1, b)
    Z: np.ndarray  # (n, M+1, p) free part, X = Z + Y R'


class Regressor:
    """Polynomial least squares on standardized, non-constant state columns."""

    def __init__(self, degree: int = 3):
        self.degree = degree

    def _features(self, X):
        Xs = (X[:, self.cols] - self.mean) / self.std
        cols = [np.ones(X.shape[0])]
        for deg in range(1, self.degree + 1):
            for combo in itertools.combinations_with_replacement(range(Xs.shape[1]), deg):
                cols.append(np.prod(Xs[:, list(combo)], axis=1))
        return np.column_stack(cols)

    def fit(self, X, targets):
        X = np.asarray(X, dtype=float)
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        self.cols = np.flatnonzero(std > 1e-12 * (1.0 + np.abs(mean)))
        self.mean = mean[self.cols]
        self.std = std[self.cols]
        A = self._features(X)
        coef, _, rank, _ = np.linalg.lstsq(A, targets, rcond=None)
        self.rank_deficient = rank < A.shape[1]
        if self.rank_deficient:
            warnings.warn(
                f"regression basis rank {rank} < {A.shape[1]}; truncated to the minimum-norm fit",
                RegressionRankWarning,
                stacklevel=3,
            )
        self.coef = coef
        self._A = A
        fitted = A @ coef
        resid = targets - fitted
        ss_tot = np.sum((targets - targets.mean(axis=0)) ** 2, axis=0)
        ss_res = np.sum(resid**2, axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            self.r2 = np.where(ss_tot > 0, 1.0 - ss_res / np.where(ss_tot > 0, ss_tot, 1.0), 1.0)
        return fitted

    def predict(self, X):
        return self._features(np.asarray(X, dtype=float)) @ self.coef

    def project(self, targets):
        """Fit further targets on the same design; returns fitted values."""
        coef = np.linalg.lstsq(self._A, targets, rcond=None)[0]
        self.extra_coef = coef
        return self._A @ coef

    def release(self):
        self._A = None


@dataclass(frozen=True, eq=False)
class BackwardFields:
    V: np.ndarray      # (n, M+1, q)
    Vbar: np.ndarray   # (n, M+1, q, d)
    Vtil: np.ndarray   # (n, M+1, q, h)
    F: np.ndarray      # (n, M+1, bbar)
    dF: np.ndarray     # (n, M+1, bbar)
    r2: np.ndarray     # (M,) regression R^2 of E[V_{k+1}|X_k]
    V0: np.ndarray     # (q,)
    V0_se: np.ndarray  # (q,)
    regressors: tuple = ()


@dataclass
class PicardDiagnostics:
    iterations: int = 0
    norms: list = field(default_factory=list)
    gamma: float = 0.0
    truncation_order: int = 0
    xi: list = field(default_factory=list)
    converged: bool = False
    diverged: bool = False
    r2: list = field(default_factory=list)

    @property
    def ratios(self) -> list:
        n = self.norms
        return [n[i] / n[i - 1] if n[i - 1] > 0 else math.inf for i in range(1, len(n))]

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "norms": self.norms,
            "ratios": self.ratios,
            "gamma": self.gamma,
            "truncation_order": self.truncation_order,
            "xi": self.xi,
            "converged": self.converged,
            "diverged": self.diverged,
            "r2_per_step": self.r2[-1] if self.r2 else [],
        }


@dataclass(frozen=True, eq=False)
class EnsembleSolution:
    times: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    V: np.ndarray
    Vbar: np.ndarray
    Vtil: np.ndarray
    F: np.ndarray
    dF: np.ndarray
    V0: np.ndarray
    V0_se: np.ndarray
    seed: int
    path_ids: np.ndarray
    regressors: tuple = ()
    diagnostics: PicardDiagnostics | None = None
    disc_err: np.ndarray | None = None

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]

    @property
    def dY(self):
        return np.diff(self.Y, axis=1, prepend=np.zeros_like(self.Y[:, :1]))

    def error(self) -> np.ndarray:
        """Monte Carlo standard error combined with the step-doubling error estimate."""
        disc = np.zeros_like(self.V0_se) if self.disc_err is None else self.disc_err
        return np.sqrt(self.V0_se**2 + disc**2)

    def summary(self) -> dict:
        return {
            "V0": self.V0.tolist(),
            "V0_se": self.V0_se.tolist(),
            "V0_disc_err": None if self.disc_err is None else self.disc_err.tolist(),
            "V0_error": self.error().tolist(),
            "n_paths": int(self.n_paths),
            "n_steps": int(self.times.size - 1),
            "seed": self.seed,
            "mean_X_T": self.X[:, -1].mean(axis=0).tolist(),
            "mean_Y_T": self.Y[:, -1].mean(axis=0).tolist(),
            "mean_F_T": self.F[:, -1].mean(axis=0).tolist() if self.F.size else [],
        }

    def save(self, path):
        arrays = {k: getattr(self, k) for k in ("times", "X", "Y", "Z", "V", "Vbar", "Vtil",
                                                 "F", "dF", "V0", "V0_se", "path_ids")}
        np.savez(path, seed=self.seed, **arrays)

    @classmethod
    def load(cls, path) -> "EnsembleSolution":
        with np.load(path) as data:
            kw = {k: data[k] for k in data.files if k != "seed"}
            return cls(seed=int(data["seed"]), **kw)


def _as_ensemble(drv) -> DriverEnsemble:
    if isinstance(drv, DriverEnsemble):
        return drv
    if isinstance(drv, PathGrid):
        sums = drv.mark_sums()[None]
        counts = drv.counts()[None]
        return DriverEnsemble(drv.times, drv.dW[None], sums, counts, drv.compensator,
                              drv.driver, -1, np.zeros(1, dtype=np.int64))
    raise TypeError("expected a DriverEnsemble or PathGrid")


def _frozen_or_zero(fields, n, m1, co):
    if fields is None:
        return (np.zeros((n, m1, co.q)), np.zeros((n, m1, co.q, co.d)),
                np.zeros((n, m1, co.q, co.h)))
    V, Vbar, Vtil = fields
    for arr, tail in ((V, (co.q,)), (Vbar, (co.q, co.d)), (Vtil, (co.q, co.h))):
        if arr.shape != (n, m1, *tail):
            raise DimensionError(f"frozen backward field has shape {arr.shape}, "
                                 f"expected {(n, m1, *tail)}")
    return V, Vbar, Vtil


def simulate_forward(problem: FBSDEProblem, drv, frozen=None) -> ForwardPaths:
    """Reflected Euler scheme for X given frozen (V, Vbar, Vtil) per step."""
    drv = _as_ensemble(drv)
    co = problem.coefficients
    spec = problem.forward
    if spec is not None and not spec.completely_s:
        raise InfeasibleLCPError("forward reflection matrix is not completely-S")
    times = drv.times
    n, M = drv.n_paths, times.size - 1
    V, Vbar, Vtil = _frozen_or_zero(frozen, n, M + 1, co)
    b = spec.b if spec is not None else 0
    X = np.empty((n, M + 1, co.p))
    Z = np.empty_like(X)
    Y = np.zeros((n, M + 1, b))
    X[:, 0] = problem.x0
    Z[:, 0] = problem.x0
    comp = drv.compensated
    for k in range(M):
        t, dt = times[k], times[k + 1] - times[k]
        x = X[:, k]
        args = (t, x, V[:, k], Vbar[:, k], Vtil[:, k], co.controls(t, x))
        dz = co.evaluate("b", *args, (n, co.p)) * dt
        if co.d:
            sig = co.evaluate("sigma", *args, (n, co.p, co.d))
            dz = dz + np.einsum("npd,nd->np", sig, drv.dW[:, k])
        if co.h:
            eta = co.evaluate("eta", *args, (n, co.p, co.h))
            dz = dz + np.einsum("nph,nh->np", eta, comp[:, k])
        Z[:, k + 1] = Z[:, k] + dz
        if spec is None:
            X[:, k + 1] = Z[:, k + 1]
            continue
        dy, _, _, ok = _lcp_batch(spec, x + dz)
        if not ok.all():
            raise InfeasibleLCPError("forward reflection failed", step=k + 1)
        Y[:, k + 1] = Y[:, k] + dy
        X[:, k + 1] = apply_reflection(Z[:, k + 1], Y[:, k + 1], spec.R)
    return ForwardPaths(times, X, Y, Z)


def _is_deterministic(x):
    return np.all(np.ptp(x, axis=0) <= 1e-14 * (1.0 + np.abs(x).max()))


def solve_backward_lsmc(problem: FBSDEProblem, fwd: ForwardPaths, drv,
                        degree: int = 3) -> BackwardFields:
    """Backward regression recursion from V(T) = H(X(T))."""
    drv = _as_ensemble(drv)
    co = problem.coefficients
    spec = problem.backward
    if spec is not None and not spec.completely_s:
        raise InfeasibleLCPError("backward reflection matrix is not completely-S")
    times = fwd.times
    X = fwd.X
    n, m1, _ = X.shape
    M = m1 - 1
    q, d, h = co.q, co.d, co.h
    bbar = spec.b if spec is not None else 0
    V = np.empty((n, m1, q))
    Vbar = np.zeros((n, m1, q, d))
    Vtil = np.zeros((n, m1, q, h))
    dF = np.zeros((n, m1, bbar))
    r2 = np.ones(M)
    regs: list = [None] * m1
    try:
        VT = np.asarray(co.H(X[:, M]), dtype=float).reshape(n, q)
    except Exception as exc:  # noqa: BLE001
        raise CoefficientError(f"terminal map failed: {exc}") from exc
    if spec is not None and not np.all(spec.domain.contains(VT, tol=BOUNDARY_TOL)):
        raise ParameterError("terminal map H leaves the backward domain")
    V[:, M] = VT
    jump_scale = None
    if h:
        jump_scale = drv.driver.lam * drv.driver.mark_second_moments()
    comp = drv.compensated
    # pathwise accumulation H + sum dt c (+ pushes); its sample mean equals V0
    # when the regressions carry an intercept, so its spread gives the SE
    pathwise = VT.copy()
    for k in range(M - 1, -1, -1):
        t, dt = times[k], times[k + 1] - times[k]
        target = V[:, k + 1]
        x = X[:, k]
        deterministic = _is_deterministic(x)
        if deterministic:
            cond = np.broadcast_to(target.mean(axis=0), target.shape)
            ss = np.sum((target - target.mean(axis=0)) ** 2)
            r2[k] = 1.0 if ss == 0 else 0.0
        else:
            reg = Regressor(degree)
            cond = reg.fit(x, target)
            regs[k] = reg
            r2[k] = float(np.mean(np.atleast_1d(reg.r2)))
        # martingale parts regress on the centered target to cut variance
        resid = target - cond
        blocks = []
        if d:
            blocks.append((resid[:, :, None] * drv.dW[:, k, None, :] / dt).reshape(n, q * d))
        if h:
            cov = resid[:, :, None] * comp[:, k, None, :] / (dt * jump_scale[None, None, :])
            blocks.append(cov.reshape(n, q * h))
        if blocks:
            targets = np.hstack(blocks)
            if deterministic:
                fitted = np.broadcast_to(targets.mean(axis=0), targets.shape)
            else:
                fitted = regs[k].project(targets)
            off = 0
            if d:
                Vbar[:, k] = fitted[:, :q * d].reshape(n, q, d)
                off = q * d
            if h:
                Vtil[:, k] = fitted[:, off:off + q * h].reshape(n, q, h)
        if regs[k] is not None:
            regs[k].release()
        u = co.controls(t, x)
        drift = co.evaluate("c", t, x, cond, Vbar[:, k], Vtil[:, k], u, (n, q))
        vk = cond + dt * drift
        pathwise = pathwise + dt * drift
        if spec is not None:
            push, _, _, ok = _lcp_batch(spec, vk)
            if not ok.all():
                raise InfeasibleLCPError("backward reflection failed", step=k)
            dF[:, k] = push
            vk = apply_reflection(vk, push, spec.R)
            pathwise = pathwise + (vk - cond - dt * drift)
        V[:, k] = vk
    V0_se = pathwise.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(q)
    F = np.cumsum(dF, axis=1)
    return BackwardFields(V, Vbar, Vtil, F, dF, r2, V[:, 0].mean(axis=0), V0_se, tuple(regs))


@dataclass(frozen=True)
class SolverConfig:
    n_paths: int = 10_000
    n_steps: int = 100
    max_iter: int = 20
    tol: float = 1e-10
    gamma: float | None = None
    degree: int = 3
    seed: int = 0
    truncation_order: int = 0
    step_doubling: bool = False

    def __post_init__(self):
        for name in ("n_paths", "n_steps", "max_iter"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be positive")
        if self.truncation_order not in (0, 1, 2):
            raise ParameterError("truncation order must be 0, 1 or 2")


def default_gamma(problem: FBSDEProblem, times) -> float:
    L = float(np.max(problem.coefficients.lipschitz(times)))
    if L <= 0:
        return 0.0
    return 1.0 / (2.0 * L * L * problem.T)


def xi_weight(order: int, reach: float) -> float:
    """xi(c) = 1 / ((c^10)! (eta(c))! e^c) with eta(c) = reach^c, via log-gamma."""
    eta = reach**order
    log_xi = -math.lgamma(order**10 + 1) - math.lgamma(eta + 1) - order
    return math.exp(log_xi)


def _field_derivative_sup(sol, other, order, weights):
    """E[sup_t ||d^order (V_a - V_b)/dx^order||^2 e^{2 gamma t}] by central differences."""
    regs_a, regs_b = sol.regressors, other.regressors if other is not None else None
    n, m1, p = sol.X.shape
    sup = np.zeros(n)
    for k in range(m1 - 1):
        ra = regs_a[k] if k < len(regs_a) else None
        rb = regs_b[k] if regs_b is not None and k < len(regs_b) else None
        if ra is None and rb is None:
            continue
        x = sol.X[:, k]
        step = 1e-3 * (1.0 + np.abs(x).max())
        total = np.zeros(n)
        for i in range(p):
            e = np.zeros(p)
            e[i] = step

            def g(xx):
                va = ra.predict(xx) if ra is not None else 0.0
                vb = rb.predict(xx) if rb is not None else 0.0
                return va - vb

            if order == 1:
                der = (g(x + e) - g(x - e)) / (2 * step)
            else:
                der = (g(x + e) - 2 * g(x) + g(x - e)) / step**2
            total += np.sum(np.atleast_2d(der) ** 2, axis=-1) if np.ndim(der) else 0.0
        sup = np.maximum(sup, total * weights[k])
    return float(sup.mean())


def weighted_norm(a: EnsembleSolution, b: EnsembleSolution | None, gamma: float,
                  driver: LevyDriver | None = None, truncation_order: int = 0,
                  reach: float | None = None) -> float:
    """Squared Q_gamma distance between two ensembles on the same grid and driver."""
    if b is not None:
        if a.times.shape != b.times.shape or not np.array_equal(a.times, b.times):
            raise GridError("ensembles live on different time grids")
        if a.seed != b.seed or not np.array_equal(a.path_ids, b.path_ids):
            raise GridError("ensembles use different driver realizations")
        dX, dV = a.X - b.X, a.V - b.V
        dVbar, dVtil = a.Vbar - b.Vbar, a.Vtil - b.Vtil
    else:
        dX, dV, dVbar, dVtil = a.X, a.V, a.Vbar, a.Vtil
    times = a.times
    w = np.exp(2.0 * gamma * times)
    dt = np.diff(times)
    sup_term = np.max((np.sum(dX**2, axis=2) + np.sum(dV**2, axis=2)) * w[None, :], axis=1)
    total = float(sup_term.mean())
    if dVbar.size:
        inner = np.sum(dVbar[:, :-1] ** 2, axis=(2, 3))
        total += float(np.mean(np.sum(inner * (w[:-1] * dt)[None, :], axis=1)))
    if dVtil.size:
        if driver is None:
            raise ParameterError("jump part of the norm needs the driver's mark law")
        scale = driver.lam * driver.mark_second_moments()
        inner = np.sum(dVtil[:, :-1] ** 2 * scale[None, None, None, :], axis=(2, 3))
        total += float(np.mean(np.sum(inner * (w[:-1] * dt)[None, :], axis=1)))
    if truncation_order:
        if reach is None:
            reach = float(np.max(np.sum(np.abs(a.X), axis=2)))
        for c in range(1, truncation_order + 1):
            xi = xi_weight(c, reach)
            if xi > 0:
                total += xi * _field_derivative_sup(a, b, c, w)
    return total


def _assemble(times, fwd: ForwardPaths, bwd: BackwardFields, drv: DriverEnsemble,
              diagnostics=None) -> EnsembleSolution:
    return EnsembleSolution(times, fwd.X, fwd.Y, fwd.Z, bwd.V, bwd.Vbar, bwd.Vtil, bwd.F,
                            bwd.dF, bwd.V0, bwd.V0_se, drv.seed, drv.path_ids,
                            bwd.regressors, diagnostics)


def _zero_solution(problem, drv):
    co = problem.coefficients
    n, m1 = drv.n_paths, drv.times.size
    bf = problem.forward.b if problem.forward is not None else 0
    bb = problem.backward.b if problem.backward is not None else 0
    z = np.zeros
    return EnsembleSolution(drv.times, z((n, m1, co.p)), z((n, m1, bf)), z((n, m1, co.p)),
                            z((n, m1, co.q)), z((n, m1, co.q, co.d)), z((n, m1, co.q, co.h)),
                            z((n, m1, bb)), z((n, m1, bb)), z(co.q), z(co.q), drv.seed,
                            drv.path_ids)


def _picard_core(problem, drv, config, gamma):
    diag = PicardDiagnostics(gamma=gamma, truncation_order=config.truncation_order)
    if config.truncation_order:
        diag.xi = [xi_weight(c, 1.0) for c in range(1, config.truncation_order + 1)]
    prev = _zero_solution(problem, drv)
    sol = prev
    growth_run = 0
    for it in range(1, config.max_iter + 1):
        frozen = (prev.V, prev.Vbar, prev.Vtil)
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                fwd = simulate_forward(problem, drv, frozen)
                bwd = solve_backward_lsmc(problem, fwd, drv, config.degree)
            except CoefficientError:
                if it == 1:
                    raise
                diag.diverged = True
                warnings.warn("Picard iteration blew up (non-finite coefficients); "
                              "returning the last finite iterate", DivergenceWarning,
                              stacklevel=3)
                break
            sol = _assemble(drv.times, fwd, bwd, drv)
            norm = weighted_norm(sol, prev, gamma, problem.driver, config.truncation_order)
        diag.iterations = it
        diag.norms.append(norm)
        diag.r2.append(bwd.r2.tolist())
        if not np.isfinite(norm):
            diag.diverged = True
            warnings.warn("Picard differences are no longer finite", DivergenceWarning,
                          stacklevel=3)
            break
        if it >= 2 and norm < config.tol:
            diag.converged = True
            prev = sol
            break
        if len(diag.norms) >= 2:
            growth_run = growth_run + 1 if norm >= diag.norms[-2] else 0
            if growth_run >= 3:
                diag.diverged = True
                warnings.warn(
                    f"Picard iteration is not contracting: norm ratio >= 1 for 3 consecutive "
                    f"iterations (norms {diag.norms[-4:]})",
                    DivergenceWarning,
                    stacklevel=3,
                )
                prev = sol
                break
        prev = sol
    return replace(prev, diagnostics=diag), diag


def _coarsen(drv: DriverEnsemble) -> DriverEnsemble:
    M = drv.times.size - 1
    if M % 2:
        raise GridError("step doubling needs an even number of steps")
    dW = drv.dW[:, 0::2] + drv.dW[:, 1::2]
    sums = drv.mark_sums[:, 0::2] + drv.mark_sums[:, 1::2]
    counts = drv.counts[:, 0::2] + drv.counts[:, 1::2]
    comp = drv.compensator[0::2] + drv.compensator[1::2]
    return DriverEnsemble(drv.times[0::2], dW, sums, counts, comp, drv.driver, drv.seed,
                          drv.path_ids)


def picard_iterate(problem: FBSDEProblem, config: SolverConfig = SolverConfig(),
                   drv: DriverEnsemble | None = None):
    """Alternate forward and backward solves on one frozen driver realization.

    Starts from zero backward fields, stops when the squared weighted norm of
    successive differences falls below ``config.tol``.  With
    ``step_doubling`` the run is repeated on the pairwise-coarsened driver
    and |V0(dt) - V0(2 dt)| is stored as the time-discretization error.
    """
    times = np.linspace(0.0, problem.T, config.n_steps + 1)
    if drv is None:
        drv = sample_ensemble(problem.driver, times, config.n_paths, config.seed)
    gamma = config.gamma if config.gamma is not None else default_gamma(problem, drv.times)
    sol, diag = _picard_core(problem, drv, config, gamma)
    if config.step_doubling:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DivergenceWarning)
            coarse, _ = _picard_core(problem, _coarsen(drv), config, gamma)
        sol = replace(sol, disc_err=np.abs(sol.V0 - coarse.V0))
    return sol, diag


def validate_solution(sol: EnsembleSolution, problem: FBSDEProblem | None = None,
                      n_spot: int = 200, tol: float = BOUNDARY_TOL) -> dict:
    """Terminal, complementarity, monotonicity and growth-bound checks."""
    report: dict = {}
    if problem is not None:
        co = problem.coefficients
        VT = np.asarray(co.H(sol.X[:, -1]), dtype=float).reshape(sol.V[:, -1].shape)
        report["terminal_residual"] = float(np.max(np.abs(sol.V[:, -1] - VT)))
    dY = sol.dY
    dF = sol.dF
    report["Y_monotone"] = bool(np.all(dY >= 0))
    report["F_monotone"] = bool(np.all(dF >= 0)) and bool(np.all(np.diff(sol.F, axis=1) >= 0))
    report["Y_start_zero"] = bool(np.all(sol.Y[:, 0] == 0))
    if problem is not None and problem.forward is not None:
        off = ~problem.forward.domain.on_face(sol.X, tol)
        comp = np.sum(dY * off, axis=(0, 1))
        report["Y_complementarity"] = comp.tolist()
        report["X_in_domain"] = bool(np.all(problem.forward.domain.contains(sol.X, tol)))
    if problem is not None and problem.backward is not None:
        off = ~problem.backward.domain.on_face(sol.V, tol)
        comp = np.sum(dF * off, axis=(0, 1))
        report["F_complementarity"] = comp.tolist()
        report["V_in_domain"] = bool(np.all(problem.backward.domain.contains(sol.V, tol)))
    if problem is not None:
        report["growth"] = _growth_spot_check(sol, problem, n_spot)
    violations = []
    if report.get("terminal_residual", 0.0) != 0.0:
        violations.append("terminal residual nonzero")
    if not report["Y_monotone"]:
        violations.append("Y decreases")
    if not report["F_monotone"]:
        violations.append("F decreases")
    if not report["Y_start_zero"]:
        violations.append("Y(0) nonzero")
    for key in ("Y_complementarity", "F_complementarity"):
        if key in report and any(v != 0 for v in report[key]):
            violations.append(f"{key} nonzero")
    for key in ("X_in_domain", "V_in_domain"):
        if key in report and not report[key]:
            violations.append(f"{key} false")
    if "growth" in report and report["growth"]["violations"]:
        violations.append("growth bound exceeded")
    report["violations"] = violations
    report["ok"] = not violations
    return report


def _growth_spot_check(sol, problem, n_spot):
    co = problem.coefficients
    rng = np.random.default_rng(0)
    n, m1, _ = sol.X.shape
    paths = rng.integers(0, n, n_spot)
    steps = rng.integers(0, m1 - 1, n_spot)
    t = sol.times[steps]
    worst = {}
    bad = 0
    lam2 = (problem.driver.lam * problem.driver.mark_second_moments()) if co.h else None
    for k in np.unique(steps):
        sel = steps == k
        idx = paths[sel]
        x, v = sol.X[idx, k], sol.V[idx, k]
        vbar, vtil = sol.Vbar[idx, k], sol.Vtil[idx, k]
        u = co.controls(sol.times[k], x)
        m = idx.size
        nu = (np.sqrt(np.sum(vtil**2 * lam2[None, None, :], axis=(1, 2))) if co.h
              else np.zeros(m))
        scale = 1 + np.linalg.norm(x, axis=1) + np.linalg.norm(v, axis=1) \
            + np.linalg.norm(vbar.reshape(m, -1), axis=1) + nu
        L = co.lipschitz(t[sel])
        for name, shape in (("b", (m, co.p)), ("sigma", (m, co.p, co.d)), ("c", (m, co.q)),
                            ("alpha", (m, co.q, co.d))):
            val = co.evaluate(name, sol.times[k], x, v, vbar, vtil, u, shape)
            size = np.linalg.norm(val.reshape(m, -1), axis=1)
            ratio = size / (L * scale)
            worst[name] = max(worst.get(name, 0.0), float(ratio.max()) if m else 0.0)
            bad += int(np.sum(ratio > 1 + 1e-12))
    return {"max_ratio": worst, "violations": bad, "samples": int(n_spot)}


def linear_coefficients(p, q, d, h=0, bx=None, bv=None, b0=None, sigma=None, eta=None,
                        cx=None, cv=None, c0=None, G=None, H0=None, L=1.0) -> CoefficientSet:
    """Affine coefficients: b = bx x + bv v + b0, c = cx x + cv v + c0, H = G x + H0."""

    def mat(a, shape):
        return np.zeros(shape) if a is None else np.asarray(a, dtype=float).reshape(shape)

    Bx, Bv, B0 = mat(bx, (p, p)), mat(bv, (p, q)), mat(b0, (p,))
    Sg, Et = mat(sigma, (p, d)), mat(eta, (p, h))
    Cx, Cv, C0 = mat(cx, (q, p)), mat(cv, (q, q)), mat(c0, (q,))
    Gm, Hc = mat(G, (q, p)), mat(H0, (q,))

    return CoefficientSet(
        p, q, d, h,
        b=lambda t, x, v, vb, vt, u: x @ Bx.T + v @ Bv.T + B0,
        sigma=lambda t, x, v, vb, vt, u: np.broadcast_to(Sg, (x.shape[0], p, d)),
        eta=lambda t, x, v, vb, vt, u: np.broadcast_to(Et, (x.shape[0], p, h)),
        c=lambda t, x, v, vb, vt, u: x @ Cx.T + v @ Cv.T + C0,
        H=lambda x: x @ Gm.T + Hc,
        L=L,
    )


def problem_from_dict(cfg: dict) -> FBSDEProblem:
    """Problem built from the affine coefficient family of ``linear_coefficients``."""
    from .reflection import spec_from_dict

    driver = LevyDriver.from_dict(cfg.get("driver", {"d": 1}))
    co_cfg = dict(cfg.get("coefficients", {}))
    p, q = int(cfg["p"]), int(cfg["q"])
    terminal = co_cfg.pop("H", None)
    co = linear_coefficients(p, q, driver.d, driver.h, **co_cfg)
    if terminal is not None:
        co = replace(co, H=terminal_from_dict(terminal, p, q))
    fwd = spec_from_dict(cfg["forward"]) if cfg.get("forward") else None
    bwd = spec_from_dict(cfg["backward"]) if cfg.get("backward") else None
    return FBSDEProblem(co, driver, float(cfg["T"]), np.asarray(cfg["x0"], dtype=float), fwd, bwd)


def terminal_from_dict(cfg: dict, p: int, q: int):
    kind = cfg.get("kind")
    if kind == "constant":
        value = np.asarray(cfg["value"], dtype=float).reshape(q)
        return lambda x: np.broadcast_to(value, (x.shape[0], q)).copy()
    if kind == "linear":
        G = np.asarray(cfg["G"], dtype=float).reshape(q, p)
        h0 = np.asarray(cfg.get("const", np.zeros(q)), dtype=float).reshape(q)
        return lambda x: x @ G.T + h0
    if kind == "positive_part":
        G = np.asarray(cfg["G"], dtype=float).reshape(q, p)
        h0 = np.asarray(cfg.get("const", np.zeros(q)), dtype=float).reshape(q)
        return lambda x: np.maximum(x @ G.T + h0, 0.0)
    raise ParameterError(f"unknown terminal map kind {kind!r}")
