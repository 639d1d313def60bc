"""Reflection geometry, completely-S checks and discrete Skorohod maps.

A domain is either the positive orthant of R^p or a hyperbox
[0, u_1] x ... x [0, u_p].  Faces are numbered 0..p-1 for the lower faces
{x_i = 0} and p..2p-1 for the upper faces {x_i = u_i}.  Face i is
{x : n_i . x = c_i} and the domain is {x : n_i . x >= c_i for all i}; with
inward normals n_i = e_i (lower) or -e_i (upper), c_i = 0 on lower faces and
c_i = -u_i on upper faces.

The reflection matrix R is p x b; its column j is the direction along which
the regulator y_j pushes.  All per-step pushes are solutions of the linear
complementarity problem in the regulator increment dy::

    w = x_pre + dz,   slack(dy) = N'(w + R dy) - c >= 0,
    dy >= 0,          dy_i * slack_i(dy) = 0,

solved by enumerating admissible active face sets.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import linprog

from . import _io
from .errors import (
    ConvergenceError,
    DimensionError,
    InfeasibleLCPError,
    NormalizationError,
    ParameterError,
)

BOUNDARY_TOL = 1e-9
LP_MARGIN = 1e-8
_LCP_RTOL = 1e-12


@dataclass(frozen=True)
class Domain:
    kind: str
    p: int
    upper: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("orthant", "hyperbox"):
            raise ParameterError(f"unknown domain kind {self.kind!r}")
        if int(self.p) != self.p or self.p < 1:
            raise ParameterError("dimension p must be a positive integer")
        if self.kind == "hyperbox":
            if self.upper is None or len(self.upper) != self.p:
                raise ParameterError("hyperbox needs one upper bound per axis")
            if any(not (u > 0 and np.isfinite(u)) for u in self.upper):
                raise ParameterError("hyperbox upper bounds must be positive")
            object.__setattr__(self, "upper", tuple(float(u) for u in self.upper))
        elif self.upper is not None:
            raise ParameterError("orthant takes no upper bounds")

    @classmethod
    def orthant(cls, p: int) -> "Domain":
        return cls("orthant", p)

    @classmethod
    def hyperbox(cls, upper: Sequence[float]) -> "Domain":
        return cls("hyperbox", len(upper), tuple(upper))

    @property
    def n_faces(self) -> int:
        return self.p if self.kind == "orthant" else 2 * self.p

    @cached_property
    def offsets(self) -> np.ndarray:
        """Face offsets b_i: 0 on lower faces, u_i on upper faces."""
        b = np.zeros(self.n_faces)
        if self.kind == "hyperbox":
            b[self.p:] = self.upper
        return b

    @cached_property
    def normals(self) -> np.ndarray:
        """Inward unit normals as rows, shape (b, p)."""
        eye = np.eye(self.p)
        if self.kind == "orthant":
            return eye
        return np.vstack([eye, -eye])

    @cached_property
    def levels(self) -> np.ndarray:
        c = np.zeros(self.n_faces)
        if self.kind == "hyperbox":
            c[self.p:] = -np.asarray(self.upper)
        return c

    def slack(self, x) -> np.ndarray:
        """Signed distance to every face, nonnegative inside the domain."""
        return np.asarray(x, dtype=float) @ self.normals.T - self.levels

    def contains(self, x, tol: float = BOUNDARY_TOL):
        return np.all(self.slack(x) >= -tol, axis=-1)

    def on_face(self, x, tol: float = BOUNDARY_TOL) -> np.ndarray:
        return np.abs(self.slack(x)) <= tol

    def opposite(self, i: int) -> int | None:
        if self.kind == "orthant":
            return None
        return i + self.p if i < self.p else i - self.p

    @cached_property
    def admissible_sets(self) -> tuple[tuple[int, ...], ...]:
        """Nonempty face sets that can be simultaneously active."""
        out = []
        for size in range(1, self.p + 1):
            for combo in itertools.combinations(range(self.n_faces), size):
                axes = [i % self.p for i in combo]
                if len(set(axes)) == len(axes):
                    out.append(combo)
        return tuple(out)

    @cached_property
    def corner_sets(self) -> tuple[tuple[int, ...], ...]:
        """Face sets with exactly one face per axis (the p x p blocks of N'R)."""
        if self.kind == "orthant":
            return (tuple(range(self.p)),)
        out = []
        for choice in itertools.product((0, 1), repeat=self.p):
            out.append(tuple(sorted(i + c * self.p for i, c in enumerate(choice))))
        return tuple(out)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "p": self.p}
        if self.upper is not None:
            d["upper"] = list(self.upper)
        return d


def is_s_matrix(M) -> tuple[bool, np.ndarray | None]:
    """Decide whether some x > 0 has M x > 0.

    The open conditions are closed with a margin, x >= eps and M x >= eps.
    Both sets are cones, so the LP is posed with eps rescaled to one, which
    keeps the margin well above the LP solver's feasibility tolerance.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise DimensionError("matrix entries must be finite")
    n = M.shape[0]
    if n == 1:
        return (True, np.ones(1)) if M[0, 0] > 0 else (False, None)
    scale = 1.0 / LP_MARGIN
    res = linprog(
        np.zeros(n),
        A_ub=-M,
        b_ub=-np.ones(n) * LP_MARGIN * scale,
        bounds=[(LP_MARGIN * scale, None)] * n,
        method="highs",
    )
    if res.status != 0:
        return False, None
    x = res.x
    if np.all(x > 0) and np.all(M @ x > 0):
        return True, x
    return False, None


def is_completely_s(spec: "ReflectionSpec") -> tuple[bool, dict]:
    """Check every principal block of N'R over simultaneously active faces.

    Returns the verdict and a certificate mapping each checked face set to
    its positive witness.  The search stops at the first failing block;
    the certificate then also records it under the key ``"failed"``.
    """
    A = spec.NR
    witnesses: dict = {}
    for J in spec.domain.admissible_sets:
        ok, w = is_s_matrix(A[np.ix_(J, J)])
        if not ok:
            witnesses["failed"] = J
            return False, witnesses
        witnesses[J] = w
    return True, witnesses


def spectral_radius(Q, rtol: float = 1e-10, max_iter: int = 10_000) -> float:
    """Spectral radius of a nonnegative matrix by shifted power iteration.

    Iterates on Q + I, which is primitive whenever Q is irreducible, and
    brackets the Perron root with Collatz-Wielandt bounds.  Falls back to a
    dense eigensolve when the bracket has not closed after ``max_iter``.
    """
    Q = np.asarray(Q, dtype=float)
    if np.any(Q < 0):
        raise ParameterError("power iteration needs a nonnegative matrix")
    lo, hi = _perron_bracket(Q, rtol, max_iter)
    if hi - lo <= rtol * hi:
        return 0.5 * (lo + hi) - 1.0
    return float(np.max(np.abs(np.linalg.eigvals(Q))))


def _perron_bracket(Q, rtol, max_iter, stop=None):
    B = Q + np.eye(Q.shape[0])
    v = np.ones(Q.shape[0])
    lo, hi = 0.0, np.inf
    for _ in range(max_iter):
        Bv = B @ v
        ratios = Bv / v
        lo, hi = max(lo, ratios.min()), min(hi, ratios.max())
        if hi - lo <= rtol * hi:
            break
        if stop is not None and stop(lo, hi):
            break
        v = Bv / Bv.max()
    return lo, hi


def normalized_blocks(spec: "ReflectionSpec") -> list[tuple[tuple[int, ...], np.ndarray]]:
    """The p x p blocks of N'R with columns scaled to unit diagonal."""
    out = []
    for J in spec.domain.corner_sets:
        block = spec.NR[np.ix_(J, J)]
        d = np.diag(block)
        if np.any(d <= 0):
            raise NormalizationError(
                f"block {J} has nonpositive diagonal {d}; cannot scale to unit diagonal"
            )
        block = block / d[None, :]
        if not np.allclose(np.diag(block), 1.0, rtol=0, atol=1e-14):
            raise NormalizationError(f"block {J} failed unit-diagonal normalization")
        out.append((J, block))
    return out


def spectral_radius_condition(spec: "ReflectionSpec", rtol: float = 1e-10) -> bool:
    """rho(|I - A|) < 1 for every unit-diagonal p x p block A of N'R."""
    for _, block in normalized_blocks(spec):
        Q = np.abs(np.eye(block.shape[0]) - block)
        lo, hi = _perron_bracket(
            Q, rtol, 10_000, stop=lambda lo, hi: hi < 2.0 - rtol or lo >= 2.0 - rtol
        )
        if hi < 2.0 - rtol:
            continue
        if lo >= 2.0 - rtol:
            return False
        if spectral_radius(Q, rtol) >= 1.0 - rtol:
            return False
    return True


@dataclass(frozen=True, eq=False)
class ReflectionSpec:
    domain: Domain
    R: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=float)
        if R.ndim == 1 and R.size == self.domain.p * self.domain.n_faces:
            R = R.reshape(self.domain.p, self.domain.n_faces)
        if R.shape != (self.domain.p, self.domain.n_faces):
            raise DimensionError(
                f"R must be {self.domain.p}x{self.domain.n_faces}, got {R.shape}"
            )
        if not np.all(np.isfinite(R)):
            raise DimensionError("R entries must be finite")
        R.setflags(write=False)
        object.__setattr__(self, "R", R)

    @classmethod
    def orthant(cls, R) -> "ReflectionSpec":
        R = np.atleast_2d(np.asarray(R, dtype=float))
        return cls(Domain.orthant(R.shape[0]), R)

    @property
    def p(self) -> int:
        return self.domain.p

    @property
    def b(self) -> int:
        return self.domain.n_faces

    @cached_property
    def NR(self) -> np.ndarray:
        return self.domain.normals @ self.R

    @cached_property
    def certificate(self) -> tuple[bool, dict]:
        return is_completely_s(self)

    @property
    def completely_s(self) -> bool:
        return self.certificate[0]

    @cached_property
    def spectral_ok(self) -> bool:
        try:
            return spectral_radius_condition(self)
        except NormalizationError:
            return False

    @cached_property
    def _blocks(self):
        blocks = []
        for J in self.domain.admissible_sets:
            sub = self.NR[np.ix_(J, J)]
            try:
                inv = np.linalg.inv(sub)
            except np.linalg.LinAlgError:
                continue
            if not np.all(np.isfinite(inv)):
                continue
            nJ = self.domain.normals[list(J)]
            bound = np.linalg.norm(inv, 2) * np.linalg.norm(nJ, 2)
            blocks.append((J, inv, bound))
        return blocks

    @cached_property
    def p_matrix(self) -> bool:
        """All admissible principal minors positive, so every LCP is uniquely solvable."""
        for J in self.domain.admissible_sets:
            if np.linalg.det(self.NR[np.ix_(J, J)]) <= 0:
                return False
        return True

    @cached_property
    def lcp_constant(self) -> float:
        """max ||A_JJ^-1|| ||N_J|| over invertible admissible blocks."""
        return max((bnd for _, _, bnd in self._blocks), default=0.0)

    def to_dict(self) -> dict:
        return {"domain": self.domain.to_dict(), "R": self.R.tolist()}


class LCPResult(NamedTuple):
    dx: np.ndarray
    dy: np.ndarray
    unique: bool
    C: float
    active: tuple[int, ...]


def _lcp_batch(spec: ReflectionSpec, w: np.ndarray):
    """Regulator increments pushing each row of ``w`` into the domain.

    Returns (dy, unique, bound, ok) with ``ok`` False for rows where no
    active set produced a complementary solution.
    """
    n = w.shape[0]
    dom = spec.domain
    slack = w @ dom.normals.T - dom.levels
    dy = np.zeros((n, spec.b))
    unique = np.ones(n, dtype=bool)
    bound = np.zeros(n)
    ok = np.ones(n, dtype=bool)
    out = np.flatnonzero(np.any(slack < 0, axis=1))
    if out.size == 0:
        return dy, unique, bound, ok
    s = slack[out]
    scale = 1.0 + np.max(np.abs(s), axis=1)
    tol = _LCP_RTOL * scale
    best = np.full((out.size, spec.b), np.nan)
    best_bound = np.zeros(out.size)
    found = np.zeros(out.size, dtype=bool)
    A = spec.NR
    stop_at_first = spec.p_matrix
    for J, inv, bnd in spec._blocks:
        todo = ~found if stop_at_first else np.ones(out.size, dtype=bool)
        if not todo.any():
            break
        idx = np.flatnonzero(todo)
        J = list(J)
        yJ = -(s[idx][:, J] @ inv.T)
        new_slack = s[idx] + yJ @ A[:, J].T
        valid = np.all(yJ >= -tol[idx, None], axis=1) & np.all(
            new_slack >= -tol[idx, None], axis=1
        )
        if not valid.any():
            continue
        rows = idx[valid]
        cand = np.zeros((rows.size, spec.b))
        cand[:, J] = np.maximum(yJ[valid], 0.0)
        first = ~found[rows]
        best[rows[first]] = cand[first]
        best_bound[rows[first]] = bnd
        found[rows[first]] = True
        later = ~first
        if later.any():
            r = rows[later]
            c = cand[later]
            diff = c - best[r]
            distinct = np.max(np.abs(diff), axis=1) > 1e3 * tol[r]
            unique_r = unique[out[r]]
            unique_r[distinct] = False
            unique[out[r]] = unique_r
            swap = distinct & _lex_less(c, best[r], 1e3 * tol[r])
            best[r[swap]] = c[swap]
            best_bound[r[swap]] = bnd
    ok[out] = found
    best[~found] = 0.0
    dy[out] = best
    bound[out] = best_bound
    return dy, unique, bound, ok


def _lex_less(a, b, tol):
    """Row-wise lexicographic a < b, ignoring differences within tol."""
    diff = a - b
    big = np.abs(diff) > tol[:, None]
    first = np.argmax(big, axis=1)
    has = big.any(axis=1)
    return has & (diff[np.arange(a.shape[0]), first] < 0)


def solve_jump_lcp(x_pre, dz, spec: ReflectionSpec) -> LCPResult:
    """Regulator jump taking x_pre + dz back into the domain.

    Among several complementary solutions the lexicographically smallest
    ``dy`` is returned and ``unique`` is False.  ``C`` is the norm bound
    ||A_JJ^-1|| ||N_J|| of the active block used.
    """
    x_pre = np.asarray(x_pre, dtype=float).reshape(spec.p)
    dz = np.asarray(dz, dtype=float).reshape(spec.p)
    dy, unique, bound, ok = _lcp_batch(spec, (x_pre + dz)[None, :])
    if not ok[0]:
        raise InfeasibleLCPError(
            "no complementary active set found; is R completely-S?"
        )
    dy = dy[0]
    dx = dz + spec.R @ dy
    active = tuple(int(i) for i in np.flatnonzero(dy > 0))
    return LCPResult(dx, dy, bool(unique[0]), float(bound[0]), active)


@dataclass(frozen=True, eq=False)
class RegulatedPath:
    times: np.ndarray
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    unique: bool = True

    def __post_init__(self):
        for name in ("times", "x", "y", "z"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def dy(self) -> np.ndarray:
        return np.diff(self.y, axis=0, prepend=np.zeros((1, self.y.shape[1])))

    def complementarity(self, domain: Domain, tol: float = BOUNDARY_TOL) -> np.ndarray:
        """Per-face sum of regulator increments taken off that face."""
        off = ~domain.on_face(self.x, tol)
        return np.sum(self.dy * off, axis=0)

    def check(self, spec: ReflectionSpec, tol: float = BOUNDARY_TOL) -> dict:
        dy = self.dy
        comp = self.complementarity(spec.domain, tol)
        min_slack = float(spec.domain.slack(self.x).min())
        identity = np.array_equal(self.x, apply_reflection(self.z, self.y, spec.R))
        report = {
            "in_domain": min_slack >= -tol,
            "min_slack": min_slack,
            "y0_zero": bool(np.all(self.y[0] == 0)),
            "monotone": bool(np.all(dy >= 0)),
            "complementarity": comp.tolist(),
            "complementarity_exact": bool(np.all(comp == 0)),
            "identity_exact": bool(identity),
        }
        report["ok"] = all(
            report[k]
            for k in ("in_domain", "y0_zero", "monotone", "complementarity_exact", "identity_exact")
        )
        return report

    def rows(self):
        for k in range(self.times.size):
            yield [self.times[k], *self.x[k], *self.y[k]]

    def header(self) -> list[str]:
        p, b = self.x.shape[1], self.y.shape[1]
        return ["t", *[f"x_{i + 1}" for i in range(p)], *[f"y_{i + 1}" for i in range(b)]]

    def to_csv(self, path):
        return _io.write_csv(path, self.header(), self.rows())


def apply_reflection(z, y, R) -> np.ndarray:
    """z + R y over the last axis with a fixed summation order.

    Uses an elementwise product and a last-axis sum so single rows and
    whole stacks round identically, which keeps x = z + R y exact.
    """
    return z + np.sum(y[..., None, :] * R, axis=-1)


def _as_path(z, spec: ReflectionSpec, times):
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    if z.ndim != 2 or z.shape[1] != spec.p:
        raise DimensionError(f"path must have shape (M+1, {spec.p}), got {z.shape}")
    if times is None:
        times = np.linspace(0.0, 1.0, z.shape[0])
    times = np.asarray(times, dtype=float)
    if times.shape != (z.shape[0],):
        raise DimensionError("times and path lengths differ")
    if np.any(np.diff(times) <= 0):
        raise ParameterError("time grid must be strictly increasing")
    if not spec.domain.contains(z[0], tol=0.0):
        raise ParameterError("z(0) must lie in the domain")
    return z, times


def skorokhod_solve(z, spec: ReflectionSpec, times=None) -> RegulatedPath:
    """Discrete Skorohod map by one complementarity solve per grid step."""
    z, times = _as_path(z, spec, times)
    if not spec.completely_s:
        raise InfeasibleLCPError("reflection matrix is not completely-S")
    M = z.shape[0] - 1
    x = np.empty_like(z)
    y = np.zeros((M + 1, spec.b))
    x[0] = z[0]
    unique = True
    for k in range(1, M + 1):
        w = x[k - 1] + (z[k] - z[k - 1])
        dy, uniq, _, ok = _lcp_batch(spec, w[None, :])
        if not ok[0]:
            raise InfeasibleLCPError("no complementary active set found", step=k)
        unique &= bool(uniq[0])
        y[k] = y[k - 1] + dy[0]
        x[k] = apply_reflection(z[k], y[k], spec.R)
    return RegulatedPath(times, x, y, z, unique)


def skorokhod_solve_batch(z, spec: ReflectionSpec) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized map over many paths, z of shape (n, M+1, p)."""
    z = np.asarray(z, dtype=float)
    n, m1, p = z.shape
    y = np.zeros((n, m1, spec.b))
    if spec.domain.kind == "orthant" and np.all(spec.R == np.diag(np.diag(spec.R))):
        d = np.diag(spec.R)
        if np.any(d <= 0):
            raise InfeasibleLCPError("reflection matrix is not completely-S")
        y = np.maximum.accumulate(np.maximum(-z, 0.0), axis=1) / d
        return apply_reflection(z, y, spec.R), y
    x = np.empty_like(z)
    x[:, 0] = z[:, 0]
    for k in range(1, m1):
        w = x[:, k - 1] + (z[:, k] - z[:, k - 1])
        dy, _, _, ok = _lcp_batch(spec, w)
        if not ok.all():
            raise InfeasibleLCPError("no complementary active set found", step=k)
        y[:, k] = y[:, k - 1] + dy
        x[:, k] = apply_reflection(z[:, k], y[:, k], spec.R)
    return x, y


def skorokhod_fixed_point(z, spec: ReflectionSpec, times=None, tol: float = 1e-10,
                          max_iter: int | None = None) -> RegulatedPath:
    """Discrete Skorohod map as the fixed point of coordinatewise 1-d maps.

    Each coordinate is regulated by its own lower (and upper) face with the
    cross terms of the unit-diagonal reflection matrix frozen at the
    previous iterate.  Contraction holds under ``spectral_radius_condition``.
    """
    z, times = _as_path(z, spec, times)
    if not spectral_radius_condition(spec):
        raise ConvergenceError("spectral radius condition fails; no contraction")
    M = z.shape[0] - 1
    p, b = spec.p, spec.b
    cap = max_iter if max_iter is not None else 10 * max(M, 1)
    scale = np.diag(spec.NR).copy()
    G = spec.R / scale[None, :]
    own = np.zeros((p, b), dtype=bool)
    own[np.arange(p), np.arange(p)] = True
    if spec.domain.kind == "hyperbox":
        own[np.arange(p), np.arange(p) + p] = True
    cross = np.where(own, 0.0, G)
    upper = np.asarray(spec.domain.upper) if spec.domain.kind == "hyperbox" else None
    yhat = np.zeros((M + 1, b))
    for _ in range(cap):
        w = z + yhat @ cross.T
        new = _one_dim_maps(w, upper)
        delta = np.max(np.abs(new - yhat)) if new.size else 0.0
        yhat = new
        if delta < tol:
            break
    else:
        raise ConvergenceError(f"fixed point not reached within {cap} iterations")
    y = yhat / scale[None, :]
    x = apply_reflection(z, y, spec.R)
    return RegulatedPath(times, x, y, z)


def _one_dim_maps(w, upper):
    if upper is None:
        return np.maximum.accumulate(np.maximum(-w, 0.0), axis=0)
    m1, p = w.shape
    lo = np.zeros((m1, p))
    hi = np.zeros((m1, p))
    x = w[0].copy()
    for k in range(1, m1):
        cand = x + (w[k] - w[k - 1])
        push_lo = np.maximum(-cand, 0.0)
        push_hi = np.maximum(cand - upper, 0.0)
        lo[k] = lo[k - 1] + push_lo
        hi[k] = hi[k - 1] + push_hi
        x = cand + push_lo - push_hi
    return np.hstack([lo, hi])


def _window(times, t1, t2):
    times = np.asarray(times, dtype=float)
    return np.flatnonzero((times >= t1) & (times <= t2))


def oscillation(values, times=None, t1=None, t2=None) -> float:
    """max over grid points s <= t in [t1, t2] of ||v(t) - v(s)||_inf."""
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    if times is not None:
        lo = -np.inf if t1 is None else t1
        hi = np.inf if t2 is None else t2
        v = v[_window(times, lo, hi)]
    if v.shape[0] == 0:
        return 0.0
    return float(np.max(v.max(axis=0) - v.min(axis=0)))


def modulus_of_continuity(values, times, delta: float, T: float | None = None) -> float:
    """Infimum over grid partitions with cells longer than delta of the worst cell oscillation.

    Cells are half-open [t_i, t_j) on grid points i..j-1, except the last
    cell, which also holds the terminal point.
    """
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    times = np.asarray(times, dtype=float)
    T = float(times[-1]) if T is None else float(T)
    if not (0 < delta < T):
        raise ParameterError("need 0 < delta < T")
    m = times.size - 1
    f = np.full(m + 1, np.inf)
    f[0] = 0.0
    for j in range(1, m + 1):
        stop = j + 1 if j == m else j
        seg = v[:stop][::-1]
        osc = np.max(
            np.maximum.accumulate(seg, axis=0) - np.minimum.accumulate(seg, axis=0),
            axis=1,
        )[::-1]
        starts = np.arange(stop)
        osc = osc[starts < j]
        starts = starts[: osc.size]
        ok = times[j] - times[starts] > delta
        if not ok.any():
            continue
        f[j] = np.min(np.maximum(f[starts[ok]], osc[ok]))
    if not np.isfinite(f[m]):
        raise ParameterError("no admissible partition on this grid")
    return float(f[m])


def _suffix_osc(v, a):
    seg = v[a:]
    return np.max(
        np.maximum.accumulate(seg, axis=0) - np.minimum.accumulate(seg, axis=0), axis=1
    )


def oscillation_ratios(reg: RegulatedPath):
    """Largest Osc(x)/Osc(z) and Osc(y)/Osc(z) over all grid subintervals."""
    rx = ry = 0.0
    for a in range(reg.times.size):
        oz = _suffix_osc(reg.z, a)
        ox = _suffix_osc(reg.x, a)
        oy = _suffix_osc(reg.y, a)
        pos = oz > 0
        if pos.any():
            rx = max(rx, float(np.max(ox[pos] / oz[pos])))
            ry = max(ry, float(np.max(oy[pos] / oz[pos])))
    return rx, ry


def check_oscillation_inequality(reg: RegulatedPath, kappa: float, atol: float = 1e-12) -> dict:
    """Test Osc(x) <= kappa Osc(z) and Osc(y) <= kappa Osc(z) on all subintervals."""
    violations = []
    rx = ry = 0.0
    times = reg.times
    for a in range(times.size):
        oz = _suffix_osc(reg.z, a)
        ox = _suffix_osc(reg.x, a)
        oy = _suffix_osc(reg.y, a)
        pos = oz > 0
        if pos.any():
            rx = max(rx, float(np.max(ox[pos] / oz[pos])))
            ry = max(ry, float(np.max(oy[pos] / oz[pos])))
        bad_x = ox > kappa * oz + atol
        bad_y = oy > kappa * oz + atol
        for which, bad, o in (("x", bad_x, ox), ("y", bad_y, oy)):
            for off in np.flatnonzero(bad)[:5]:
                violations.append(
                    {
                        "which": which,
                        "t1": float(times[a]),
                        "t2": float(times[a + off]),
                        "osc": float(o[off]),
                        "osc_z": float(oz[off]),
                    }
                )
    return {
        "kappa": float(kappa),
        "max_ratio_x": rx,
        "max_ratio_y": ry,
        "violations": violations,
        "ok": not violations,
    }


def random_path(domain: Domain, n_steps: int, rng, jump_prob: float = 0.3,
                scale: float = 1.0) -> np.ndarray:
    """Random piecewise-constant path starting in the domain.

    Starts at a point with some coordinates placed on lower faces; each step
    jumps with probability ``jump_prob`` by a Gaussian increment.
    """
    p = domain.p
    if domain.kind == "orthant":
        z0 = rng.exponential(scale, p)
    else:
        z0 = rng.uniform(0.0, 1.0, p) * np.asarray(domain.upper)
    z0[rng.random(p) < 0.3] = 0.0
    jumps = rng.normal(0.0, scale, (n_steps, p)) * (rng.random((n_steps, 1)) < jump_prob)
    return np.vstack([z0, z0 + np.cumsum(jumps, axis=0)])


def estimate_kappa(spec: ReflectionSpec, trials: int, seed: int, n_steps: int = 40,
                   safety: float = 1.5) -> float:
    """Sampled oscillation constant: worst observed ratio times ``safety``."""
    if int(trials) != trials or trials < 1:
        raise ParameterError("trials must be a positive integer")
    if not spec.completely_s:
        raise ParameterError("estimate_kappa needs a completely-S reflection matrix")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(int(trials)):
        z = random_path(spec.domain, n_steps, rng)
        reg = skorokhod_solve(z, spec)
        worst = max(worst, *oscillation_ratios(reg))
    return safety * worst


def spec_from_dict(cfg: dict) -> ReflectionSpec:
    dom = cfg.get("domain", {"kind": "orthant"})
    kind = dom.get("kind", "orthant")
    R = np.asarray(cfg["R"], dtype=float)
    if kind == "orthant":
        p = int(dom.get("p", R.shape[0] if R.ndim == 2 else round(np.sqrt(R.size))))
        domain = Domain.orthant(p)
    elif kind == "hyperbox":
        domain = Domain.hyperbox(dom["upper"])
    else:
        raise ParameterError(f"unknown domain kind {kind!r}")
    if R.ndim == 1:
        R = R.reshape(domain.p, domain.n_faces)
    return ReflectionSpec(domain, R)
