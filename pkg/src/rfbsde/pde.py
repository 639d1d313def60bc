"""Grid fields, the HJB-type generator, Feynman-Kac Monte Carlo and the RBM
backward transition equation.

Second-order terms follow each operator as written: the controlled HJB
generator and the RBM transition operator use the plain Hessian sum, while
the Dirichlet-Poisson generator carries a factor 1/2.  Every solver exposes
a ``half_laplacian`` switch so conventions can be matched across solvers.
"""

from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from . import _io
from .errors import (
    DimensionError,
    DiscretizationWarning,
    ExtrapolationError,
    GridError,
    ParameterError,
    StabilityError,
)
from .levy import LevyDriver, sample_ensemble
from .reflection import Domain

_SPACING_RTOL = 1e-9


@dataclass(frozen=True, eq=False)
class GridField:
    """Values V_l(t_k, x) on a uniform tensor grid.

    ``values`` has shape (n_t, q+1, n_1, ..., n_p).  First derivatives use
    central differences inside and one-sided second-order stencils on faces.
    """

    axes: tuple
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        for a in axes:
            if a.ndim != 1 or a.size < 3:
                raise GridError("each axis needs at least three nodes")
            h = np.diff(a)
            if np.any(h <= 0) or not np.allclose(h, h[0], rtol=_SPACING_RTOL, atol=0):
                raise GridError("axes must be uniformly spaced and increasing")
        times = np.atleast_1d(np.asarray(self.times, dtype=float))
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise GridError("field times must be increasing")
        values = np.asarray(self.values, dtype=float)
        shape = tuple(a.size for a in axes)
        if values.ndim != 2 + len(axes) or values.shape[0] != times.size \
                or values.shape[2:] != shape:
            raise DimensionError(f"values must have shape (n_t, q+1, *{shape}), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ParameterError("field must be finite everywhere")
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_function(cls, axes, times, func) -> "GridField":
        """Tabulate ``func(t, X) -> (q+1, *shape)`` where X has shape (p, *shape)."""
        axes = tuple(np.asarray(a, dtype=float) for a in axes)
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"))
        times = np.atleast_1d(np.asarray(times, dtype=float))
        vals = []
        for t in times:
            v = np.asarray(func(t, mesh), dtype=float)
            vals.append(np.broadcast_to(v.reshape((-1,) + mesh.shape[1:]),
                                        (v.size // mesh[0].size,) + mesh.shape[1:]))
        return cls(axes, times, np.stack(vals))

    @property
    def p(self) -> int:
        return len(self.axes)

    @property
    def n_comp(self) -> int:
        return self.values.shape[1]

    @property
    def spacing(self) -> np.ndarray:
        return np.array([a[1] - a[0] for a in self.axes])

    @property
    def shape(self) -> tuple:
        return self.values.shape[2:]

    def mesh(self) -> np.ndarray:
        return np.stack(np.meshgrid(*self.axes, indexing="ij"))

    def time_index(self, t) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-12 * max(1.0, abs(t)):
            raise GridError(f"time {t} is not a field time")
        return k

    def gradient(self, k: int) -> np.ndarray:
        """Shape (q+1, p, *shape)."""
        v = self.values[k]
        g = np.gradient(v, *self.spacing, axis=tuple(range(1, self.p + 1)), edge_order=2)
        g = [g] if self.p == 1 else g
        return np.stack(g, axis=1)

    def hessian(self, k: int) -> np.ndarray:
        """Shape (q+1, p, p, *shape), derivatives of the gradient."""
        g = self.gradient(k)
        out = np.empty((self.n_comp, self.p, self.p) + self.shape)
        for i in range(self.p):
            gi = np.gradient(g[:, i], *self.spacing, axis=tuple(range(1, self.p + 1)),
                             edge_order=2)
            gi = [gi] if self.p == 1 else gi
            for j in range(self.p):
                out[:, i, j] = gi[j]
        return 0.5 * (out + np.swapaxes(out, 1, 2))

    def _check_inside(self, pts, clamp):
        lo = np.array([a[0] for a in self.axes])
        hi = np.array([a[-1] for a in self.axes])
        eps = 1e-12 * np.maximum(1.0, np.abs(hi - lo))
        outside = np.any((pts < lo - eps) | (pts > hi + eps), axis=-1)
        if np.any(outside):
            if not clamp:
                raise ExtrapolationError(f"{int(outside.sum())} point(s) outside the grid")
            warnings.warn("points outside the grid clamped to its faces", DiscretizationWarning,
                          stacklevel=3)
        return np.clip(pts, lo, hi)

    def interpolate(self, k: int, pts, clamp: bool = False, data=None) -> np.ndarray:
        """Multilinear interpolation at points (m, p); returns (m, q+1) or (m, *data_lead)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if pts.shape[-1] != self.p:
            raise DimensionError("point dimension does not match the grid")
        pts = self._check_inside(pts, clamp)
        arr = self.values[k] if data is None else data
        lead = arr.shape[: arr.ndim - self.p]
        moved = np.moveaxis(arr.reshape((-1,) + self.shape), 0, -1)
        f = RegularGridInterpolator(self.axes, moved, method="linear")
        return f(pts).reshape((pts.shape[0],) + lead)

    def at(self, t: float, pts, clamp: bool = False) -> np.ndarray:
        """Interpolate in space and linearly in time."""
        if self.times.size == 1 or t <= self.times[0]:
            return self.interpolate(0, pts, clamp)
        if t >= self.times[-1]:
            return self.interpolate(self.times.size - 1, pts, clamp)
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        w = (t - self.times[k]) / (self.times[k + 1] - self.times[k])
        return (1 - w) * self.interpolate(k, pts, clamp) + w * self.interpolate(k + 1, pts, clamp)

    def to_csv(self, directory) -> list[str]:
        """One CSV per time slice (coordinates then components) plus a JSON manifest."""
        os.makedirs(directory, exist_ok=True)
        coords = self.mesh().reshape(self.p, -1).T
        header = [*[f"x_{i + 1}" for i in range(self.p)], *[f"V_{l}" for l in range(self.n_comp)]]
        files = []
        for k, t in enumerate(self.times):
            vals = self.values[k].reshape(self.n_comp, -1).T
            path = os.path.join(directory, f"slice_{k:05d}.csv")
            _io.write_csv(path, header, np.hstack([coords, vals]))
            files.append(path)
        manifest = {"times": self.times.tolist(), "shape": list(self.shape),
                    "files": [os.path.basename(f) for f in files]}
        files.append(_io.write_json(os.path.join(directory, "field.json"), manifest))
        return files


@dataclass(frozen=True, eq=False)
class HJBCoefficients:
    """Pointwise coefficient data for the controlled generator.

    Signatures (x is a p-vector, u the control value, v the field vector
    V_0..V_q at x, z a scalar mark of jump component j):

    b(t, x, u) -> (p,); sigma(t, x, u) -> (p, d); eta(t, x, u, z, j) -> (p,);
    c(t, x, u) -> (q,); alpha(t, x, u, v) -> (q, d); zeta(t, x, u, z, j) -> (q,);
    gamma(t, x) -> (b_faces,); beta(t, x) -> (q,).

    Player-0 entries are the sums over players 1..q and are added here, so
    callers supply players 1..q only.  ``v_refl`` is p x b_faces and ``s_refl``
    is q x q.
    """

    p: int
    q: int
    d: int
    driver: LevyDriver = field(default_factory=lambda: LevyDriver(1))
    b: Callable | None = None
    sigma: Callable | None = None
    eta: Callable | None = None
    c: Callable | None = None
    alpha: Callable | None = None
    zeta: Callable | None = None
    gamma: Callable | None = None
    beta: Callable | None = None
    v_refl: np.ndarray | None = None
    s_refl: np.ndarray | None = None

    def __post_init__(self):
        p, q, d = self.p, self.q, self.d
        if self.driver.d != d:
            raise DimensionError("driver Brownian dimension differs from d")
        nb = 0 if self.v_refl is None else np.asarray(self.v_refl).shape[1]
        object.__setattr__(self, "v_refl",
                           np.zeros((p, 0)) if self.v_refl is None
                           else np.asarray(self.v_refl, dtype=float).reshape(p, nb))
        S = np.zeros((q, q)) if self.s_refl is None else np.asarray(self.s_refl, float).reshape(q, q)
        object.__setattr__(self, "s_refl", S)
        defaults = {
            "b": lambda t, x, u: np.zeros(p),
            "sigma": lambda t, x, u: np.zeros((p, d)),
            "eta": lambda t, x, u, z, j: np.zeros(p),
            "c": lambda t, x, u: np.zeros(q),
            "alpha": lambda t, x, u, v: np.zeros((q, d)),
            "zeta": lambda t, x, u, z, j: np.zeros(q),
            "gamma": lambda t, x: np.zeros(nb),
            "beta": lambda t, x: np.zeros(q),
        }
        for name, fn in defaults.items():
            if getattr(self, name) is None:
                object.__setattr__(self, name, fn)

    @property
    def n_faces(self) -> int:
        return self.v_refl.shape[1]

    @property
    def s_full(self) -> np.ndarray:
        """(q+1) x q with row 0 the column sums."""
        return np.vstack([self.s_refl.sum(axis=0, keepdims=True), self.s_refl])

    def with_total(self, arr) -> np.ndarray:
        arr = np.asarray(arr, dtype=float)
        return np.concatenate([arr.sum(axis=0, keepdims=True), arr], axis=0)


def _grid_index(field: GridField, x) -> tuple:
    x = np.asarray(x, dtype=float).reshape(field.p)
    idx = []
    for a, xi in zip(field.axes, x):
        i = int(round((xi - a[0]) / (a[1] - a[0])))
        if not 0 <= i < a.size or abs(a[i] - xi) > 1e-9 * max(1.0, abs(xi)):
            raise GridError(f"{x} is not a grid point")
        idx.append(i)
    return tuple(idx)


def _neighbour(field, idx, axis, step):
    j = list(idx)
    j[axis] += step
    return tuple(j)


def hjb_generator_eval(field: GridField, coeffs: HJBCoefficients, control, t, x,
                       half_laplacian: bool = False, quad_nodes: int = 20,
                       clamp: bool = False) -> np.ndarray:
    """Value of the controlled generator for l = 0..q at grid point x and time t.

    ``control(t, x)`` returns the control value passed to every coefficient
    (``None`` for uncontrolled problems).
    """
    if field.p != coeffs.p or field.n_comp != coeffs.q + 1:
        raise DimensionError("field and coefficient dimensions differ")
    k = field.time_index(t)
    idx = _grid_index(field, x)
    x = np.array([a[i] for a, i in zip(field.axes, idx)])
    ctl = (lambda tt, xx: None) if control is None else control
    u = ctl(t, x)
    V = field.values[k][(slice(None),) + idx]
    grad = field.gradient(k)[(slice(None), slice(None)) + idx]       # (q+1, p)
    hess = field.hessian(k)[(slice(None), slice(None), slice(None)) + idx]
    sig = np.asarray(coeffs.sigma(t, x, u), dtype=float).reshape(coeffs.p, coeffs.d)
    a = sig @ sig.T
    second = np.einsum("ij,lij->l", a, hess)
    if half_laplacian:
        second = 0.5 * second
    drift = np.asarray(coeffs.b(t, x, u), dtype=float).reshape(coeffs.p)
    if coeffs.n_faces:
        drift = drift + coeffs.v_refl @ np.asarray(coeffs.gamma(t, x), dtype=float)
    first = grad @ drift

    # chain-rule derivative of alpha_l(t, x, u(t, x), V(t, x)) by grid differences
    h = field.spacing
    cross = np.zeros(coeffs.q + 1)
    for i in range(coeffs.p):
        n_i = field.axes[i].size
        lo = -1 if idx[i] > 0 else 0
        hi = 1 if idx[i] < n_i - 1 else 0
        vals = []
        for step in (lo, hi):
            j = _neighbour(field, idx, i, step)
            xj = np.array([ax[m] for ax, m in zip(field.axes, j)])
            vj = field.values[k][(slice(None),) + j]
            al = np.asarray(coeffs.alpha(t, xj, ctl(t, xj), vj), float).reshape(coeffs.q, coeffs.d)
            vals.append(coeffs.with_total(al))
        dalpha = (vals[1] - vals[0]) / ((hi - lo) * h[i])            # (q+1, d)
        cross += dalpha @ sig[i]

    cost = coeffs.with_total(np.asarray(coeffs.c(t, x, u), dtype=float).reshape(coeffs.q))
    reg = coeffs.s_full @ np.asarray(coeffs.beta(t, x), dtype=float).reshape(coeffs.q)

    jump = np.zeros(coeffs.q + 1)
    drv = coeffs.driver
    for j, (lam, law) in enumerate(zip(drv.rates, drv.marks)):
        nodes, weights = law.quadrature(quad_nodes)
        for z, w in zip(nodes, weights):
            e = np.asarray(coeffs.eta(t, x, u, z, j), dtype=float).reshape(coeffs.p)
            shifted = x + e
            Vs = field.interpolate(k, shifted[None, :], clamp=clamp)[0]
            taylor = Vs - V - grad @ e
            zs = coeffs.with_total(coeffs.zeta(t, shifted, u, z, j))
            z0 = coeffs.with_total(coeffs.zeta(t, x, u, z, j))
            jump -= lam * w * (taylor + zs - z0)
    return second + first + cross - cost + reg + jump


def spde_bridge(field: GridField, times, X, coeffs: HJBCoefficients, control=None,
                marks=None, clamp: bool = False) -> dict:
    """Compose a field with a forward path.

    Returns ``V`` (M+1, q+1), ``Vbar`` (M+1, q+1, d) and ``Vtil``
    (M+1, q+1, h, m) evaluated at ``marks`` (shape (h, m); quadrature nodes
    of each mark law by default) together with the marks used.
    """
    times = np.asarray(times, dtype=float)
    X = np.asarray(X, dtype=float).reshape(times.size, coeffs.p)
    ctl = (lambda tt, xx: None) if control is None else control
    drv = coeffs.driver
    if marks is None:
        marks = np.array([law.quadrature(8)[0] for law in drv.marks]).reshape(drv.h, -1)
    marks = np.asarray(marks, dtype=float).reshape(drv.h, -1)
    Q1, d = coeffs.q + 1, coeffs.d
    V = np.empty((times.size, Q1))
    Vbar = np.empty((times.size, Q1, d))
    Vtil = np.empty((times.size, Q1, drv.h, marks.shape[1]))
    grads = [field.gradient(k) for k in range(field.times.size)]
    for m, (t, x) in enumerate(zip(times, X)):
        u = ctl(t, x)
        v = field.at(t, x[None, :], clamp)[0]
        g = _grad_at(field, grads, t, x, clamp)                       # (q+1, p)
        sig = np.asarray(coeffs.sigma(t, x, u), dtype=float).reshape(coeffs.p, d)
        al = coeffs.with_total(np.asarray(coeffs.alpha(t, x, u, v), float).reshape(coeffs.q, d))
        V[m] = v
        Vbar[m] = -(al + g @ sig)
        for j in range(drv.h):
            for r, z in enumerate(marks[j]):
                e = np.asarray(coeffs.eta(t, x, u, z, j), dtype=float).reshape(coeffs.p)
                vs = field.at(t, (x + e)[None, :], clamp)[0]
                zs = coeffs.with_total(coeffs.zeta(t, x + e, u, z, j))
                Vtil[m, :, j, r] = -(vs - v) - zs
    return {"V": V, "Vbar": Vbar, "Vtil": Vtil, "marks": marks}


def _grad_at(field, grads, t, x, clamp):
    def at_k(k):
        return field.interpolate(k, x[None, :], clamp, data=grads[k])[0]
    if field.times.size == 1 or t <= field.times[0]:
        return at_k(0)
    if t >= field.times[-1]:
        return at_k(field.times.size - 1)
    k = int(np.searchsorted(field.times, t, side="right")) - 1
    w = (t - field.times[k]) / (field.times[k + 1] - field.times[k])
    return (1 - w) * at_k(k) + w * at_k(k + 1)


@dataclass(frozen=True)
class FKResult:
    value: float
    se: float
    n_paths: int
    exit_fraction: float
    max_overshoot: float

    def to_dict(self) -> dict:
        return {"value": self.value, "se": self.se, "n_paths": self.n_paths,
                "exit_fraction": self.exit_fraction, "max_overshoot": self.max_overshoot}


def _vec_fn(fn, shape_tail, default):
    if fn is None:
        return lambda t, X: np.broadcast_to(default, (X.shape[0],) + shape_tail)
    if callable(fn):
        return fn
    arr = np.asarray(fn, dtype=float).reshape(shape_tail)
    return lambda t, X: np.broadcast_to(arr, (X.shape[0],) + shape_tail)


def _exit_fraction(domain, x_prev, x_new):
    """Fraction s in (0, 1] of the step at which the segment leaves the domain."""
    lo = domain.slack(x_prev)
    hi = domain.slack(x_new)
    frac = np.ones(x_prev.shape[0])
    crossed = hi < 0
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(crossed, lo / (lo - hi), np.inf)
    s = np.min(s, axis=1)
    left = np.isfinite(s)
    frac[left] = np.clip(s[left], 0.0, 1.0)
    return left, frac


def feynman_kac_dirichlet_poisson(H, x0, T: float, n_paths: int, dt: float, seed: int,
                                  g=None, domain: Domain | None = None, H_boundary=None,
                                  b=None, sigma=None, t0: float = 0.0,
                                  half_laplacian: bool = True, source_sign: float = -1.0,
                                  overshoot_tol: float | None = None,
                                  chunk: int = 20_000) -> FKResult:
    """Monte Carlo estimate of V(t0, x0) for the Dirichlet-Poisson problem.

    Simulates dX = b dt + s dW from x0 by Euler steps until the first exit
    from the domain or T, and averages ``H(X_stop) + source_sign * int g ds``.
    The default sign matches a generator written as ``-g + (1/2) Laplacian``.
    With ``half_laplacian=False`` the diffusion is scaled by sqrt(2) so the
    generator has no 1/2 factor.  Exit points are found by linear
    interpolation of the crossing step.

    ``H``, ``g`` and ``H_boundary`` act on arrays: ``H(X)`` with X (n, p),
    ``g(t, X)``.  ``b`` and ``sigma`` are constants or callables ``(t, X)``;
    a callable ``sigma`` must return (n, p, p).
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    p = x0.size
    if not T > t0:
        raise ParameterError("horizon must exceed the start time")
    M = max(1, int(math.ceil((T - t0) / dt - 1e-9)))
    times = np.linspace(t0, T, M + 1)
    if domain is not None:
        if domain.p != p:
            raise DimensionError("start point and domain dimensions differ")
        if not domain.contains(x0, tol=0.0):
            raise ParameterError("start point outside the domain")
    if sigma is None or callable(sigma):
        d = p
        sig_fn = _vec_fn(sigma, (p, d), np.eye(p))
    else:
        d = np.asarray(sigma, dtype=float).reshape(p, -1).shape[1]
        sig_fn = _vec_fn(sigma, (p, d), None)
    b_fn = _vec_fn(b, (p,), np.zeros(p))
    g_fn = _vec_fn(g, (), 0.0)
    Hb = H if H_boundary is None else H_boundary
    scale = 1.0 if half_laplacian else math.sqrt(2.0)
    driver = LevyDriver(d)
    totals = []
    n_exit = 0
    worst = 0.0
    for start in range(0, n_paths, chunk):
        ids = np.arange(start, min(n_paths, start + chunk))
        dW = sample_ensemble(driver, times, ids.size, seed, path_ids=ids).dW
        n = ids.size
        X = np.broadcast_to(x0, (n, p)).copy()
        alive = np.ones(n, dtype=bool)
        source = np.zeros(n)
        payoff = np.zeros(n)
        for k in range(M):
            t, h = times[k], times[k + 1] - times[k]
            act = np.nonzero(alive)[0]
            if act.size == 0:
                break
            Xa = X[act]
            sg = np.asarray(sig_fn(t, Xa), dtype=float).reshape(act.size, p, d)
            step = np.asarray(b_fn(t, Xa), dtype=float) * h \
                + scale * np.einsum("nij,nj->ni", sg, dW[act, k])
            Xn = Xa + step
            gk = np.asarray(g_fn(t, Xa), dtype=float) * np.ones(act.size)
            if domain is not None:
                left, frac = _exit_fraction(domain, Xa, Xn)
            else:
                left, frac = np.zeros(act.size, dtype=bool), np.ones(act.size)
            source[act] += gk * h * frac
            if np.any(left):
                who = act[left]
                over = -np.min(domain.slack(Xn[left]), axis=1)
                worst = max(worst, float(over.max()))
                exit_pt = Xa[left] + frac[left, None] * step[left]
                exit_pt = np.maximum(exit_pt, 0.0)
                if domain.kind == "hyperbox":
                    exit_pt = np.minimum(exit_pt, np.asarray(domain.upper))
                payoff[who] = np.asarray(Hb(exit_pt), dtype=float).reshape(who.size)
                alive[who] = False
                n_exit += who.size
            X[act[~left]] = Xn[~left]
        rest = np.nonzero(alive)[0]
        if rest.size:
            payoff[rest] = np.asarray(H(X[rest]), dtype=float).reshape(rest.size)
        totals.append(payoff + source_sign * source)
    vals = np.concatenate(totals)
    if domain is not None:
        if overshoot_tol is None:
            side = np.min(domain.upper) if domain.kind == "hyperbox" else 1.0
            overshoot_tol = 0.05 * side
        if worst > overshoot_tol:
            warnings.warn(f"exit overshoot {worst:.3g} exceeds {overshoot_tol:.3g}; "
                          "use a finer time step", DiscretizationWarning, stacklevel=2)
    se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else math.inf
    return FKResult(float(vals.mean()), se, int(vals.size), n_exit / vals.size, worst)


def _face_weights(axes, domain: Domain, mollifier: str) -> np.ndarray:
    """Smoothed face indicators on the grid, shape (b, *shape)."""
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"))
    h = np.array([a[1] - a[0] for a in axes])
    out = []
    for i in range(domain.n_faces):
        axis = i % domain.p
        dist = np.abs(domain.slack(np.moveaxis(mesh, 0, -1))[..., i])
        if mollifier == "cell":
            out.append(np.clip(1.0 - dist / h[axis], 0.0, 1.0))
        elif mollifier == "none":
            out.append((dist <= 1e-12 * max(1.0, h[axis])).astype(float))
        else:
            raise ParameterError(f"unknown mollifier {mollifier!r}")
    return np.stack(out)


def _second_diff(V, axis, h):
    """Three-point second difference with mirrored ghost nodes at the ends."""
    pad = [(0, 0)] * V.ndim
    pad[axis] = (1, 1)
    W = np.pad(V, pad, mode="reflect")
    sl = [slice(None)] * V.ndim
    def take(a, b):
        s = list(sl)
        s[axis] = slice(a, b)
        return W[tuple(s)]
    n = V.shape[axis]
    return (take(2, n + 2) - 2 * V + take(0, n)) / (h * h)


def rbm_transition_backward(rbm, H, axes, T: float, dt: float, half_laplacian: bool = False,
                            mollifier: str = "cell", store_every: int = 1) -> GridField:
    """Explicit backward stepping of V(t) = H + int_t^T K(V) ds on a grid.

    K(V) = sum Gamma_ij d2V + theta . grad V + sum_i (v_i . grad V) I_i with
    the face indicators I_i smoothed over one cell.  Pure second differences
    use the three-point stencil (mirrored ghost nodes on faces), mixed ones
    and gradients the central/one-sided stencils of ``GridField``.
    """
    spec = rbm.reflection
    dom = spec.domain
    axes = tuple(np.asarray(a, dtype=float) for a in axes)
    p = spec.p
    if len(axes) != p:
        raise DimensionError("one axis per coordinate")
    for i, a in enumerate(axes):
        if abs(a[0]) > 1e-12:
            raise GridError("grid must start on the lower faces")
        if dom.kind == "hyperbox" and abs(a[-1] - dom.upper[i]) > 1e-9 * dom.upper[i]:
            raise GridError("grid must end on the upper faces")
    h = np.array([a[1] - a[0] for a in axes])
    G = np.asarray(rbm.Gamma, dtype=float) * (0.5 if half_laplacian else 1.0)
    limit = float(np.min(h) ** 2 / (2 * p * np.max(np.diag(G))))
    if dt > limit * (1 + 1e-12):
        raise StabilityError(f"time step {dt} exceeds the stability bound {limit:.6g}")
    M = max(1, int(math.ceil(T / dt - 1e-9)))
    times = np.linspace(0.0, T, M + 1)
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"))
    VT = np.asarray(H(mesh) if callable(H) else H, dtype=float)
    VT = np.broadcast_to(VT, mesh.shape[1:]).copy()
    # drift field: theta plus smoothed oblique directions on faces
    weights = _face_weights(axes, dom, mollifier)
    drift = np.asarray(rbm.theta, float).reshape((p,) + (1,) * p) \
        + np.einsum("ib,b...->i...", spec.R, weights)
    keep = list(range(M, -1, -store_every))
    if keep[-1] != 0:
        keep.append(0)
    stored = {M: VT.copy()}
    V = VT
    for k in range(M, 0, -1):
        tau = times[k] - times[k - 1]
        grads = np.gradient(V, *h, edge_order=2) if p > 1 else [np.gradient(V, h[0], edge_order=2)]
        K = np.zeros_like(V)
        for i in range(p):
            K += G[i, i] * _second_diff(V, i, h[i]) + drift[i] * grads[i]
            for j in range(p):
                if j != i and G[i, j] != 0:
                    K += G[i, j] * np.gradient(grads[i], h[j], axis=j, edge_order=2)
        V = V + tau * K
        if not np.all(np.isfinite(V)):
            raise StabilityError(f"non-finite values at step {k - 1}")
        if (k - 1) in keep:
            stored[k - 1] = V.copy()
    order = sorted(stored)
    return GridField(axes, times[order], np.stack([stored[k] for k in order])[:, None])
