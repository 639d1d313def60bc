"""Multiclass queueing networks, diffusion scaling and RBM comparison.

Queue dynamics are simulated exactly by thinning: candidate events arrive
at the declared global intensity bound and are accepted with probability
(total current intensity) / bound.  Service intensity of a class is forced
to zero while its queue is empty, so no reflection term is needed.
"""

from __future__ import annotations

import math
import warnings
from array import array
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import stats

from .errors import (
    DimensionError,
    GridError,
    IntensityBoundError,
    ParameterError,
    UnreliableWindowWarning,
)
from .levy import path_rng
from .reflection import BOUNDARY_TOL, RegulatedPath, ReflectionSpec, skorokhod_solve, \
    skorokhod_solve_batch


def _rates(spec, p, name):
    if callable(spec):
        return spec
    arr = np.asarray(spec, dtype=float).reshape(p)
    if np.any(arr < 0):
        raise ParameterError(f"{name} intensities must be nonnegative")
    return arr


@dataclass(frozen=True, eq=False)
class QueueNetwork:
    """Classes 0..p-1 with arrival, service and routing data.

    ``arrival`` and ``service`` are length-p arrays or callables
    ``(t, Q) -> array``; ``routing[j, i]`` is the probability that a class-j
    completion joins class i.  ``bound`` must dominate the total intensity in
    every visited state.
    """

    p: int
    arrival: np.ndarray | Callable
    service: np.ndarray | Callable
    bound: float
    routing: np.ndarray | Callable | None = None
    q0: tuple[int, ...] | None = None
    batch: tuple[int, ...] | None = None

    def __post_init__(self):
        p = self.p
        object.__setattr__(self, "arrival", _rates(self.arrival, p, "arrival"))
        object.__setattr__(self, "service", _rates(self.service, p, "service"))
        if self.routing is None:
            object.__setattr__(self, "routing", np.zeros((p, p)))
        elif not callable(self.routing):
            P = np.asarray(self.routing, dtype=float).reshape(p, p)
            if np.any(P < 0) or np.any(P.sum(axis=1) > 1 + 1e-12):
                raise ParameterError("routing rows must be nonnegative with sums <= 1")
            object.__setattr__(self, "routing", P)
        q0 = (0,) * p if self.q0 is None else tuple(int(v) for v in self.q0)
        if len(q0) != p or min(q0) < 0:
            raise ParameterError("initial queue must be a nonnegative integer p-vector")
        object.__setattr__(self, "q0", q0)
        batch = (1,) * p if self.batch is None else tuple(int(v) for v in self.batch)
        if len(batch) != p or min(batch) < 1:
            raise ParameterError("arrival batch sizes must be positive integers")
        object.__setattr__(self, "batch", batch)
        if not self.bound > 0:
            raise ParameterError("intensity bound must be positive")

    @classmethod
    def from_dict(cls, cfg: dict) -> "QueueNetwork":
        return cls(int(cfg["p"]), cfg["arrival"], cfg["service"], float(cfg["bound"]),
                   cfg.get("routing"), cfg.get("q0"), cfg.get("batch"))


@dataclass(frozen=True, eq=False)
class QueuePath:
    times: np.ndarray        # event times, times[0] = 0
    Q: np.ndarray            # (n_events + 1, p) state after each event
    T: float
    external: np.ndarray     # external arrivals per class (customers)
    routed_in: np.ndarray    # internal arrivals per class
    completions: np.ndarray  # service completions per class
    n_candidates: int

    @property
    def n_events(self) -> int:
        return self.times.size - 1

    def value_at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if np.any(t > self.T + 1e-12) or np.any(t < 0):
            raise GridError("evaluation time outside the simulated horizon")
        idx = np.searchsorted(self.times, t, side="right") - 1
        return self.Q[idx]

    def time_average(self, t0: float = 0.0, t1: float | None = None) -> np.ndarray:
        t1 = self.T if t1 is None else t1
        edges = np.clip(np.append(self.times, self.T), t0, t1)
        return (self.Q * np.diff(edges)[:, None]).sum(axis=0) / (t1 - t0)

    def throughput(self) -> np.ndarray:
        return self.completions / self.T


def simulate_queue(net: QueueNetwork, T: float, seed: int, block: int = 1 << 16) -> QueuePath:
    """Exact event-driven simulation on [0, T] by thinning."""
    if not T > 0:
        raise ParameterError("horizon must be positive")
    p = net.p
    rng = path_rng(seed, 0)
    lam_bound = float(net.bound)
    const_a = not callable(net.arrival)
    const_d = not callable(net.service)
    const_r = not callable(net.routing)
    a_fixed = net.arrival.tolist() if const_a else None
    d_fixed = net.service.tolist() if const_d else None
    P_cum = np.cumsum(net.routing, axis=1).tolist() if const_r else None
    batch = list(net.batch)
    Q = list(net.q0)
    times = array("d", [0.0])
    states = array("l", Q)
    external = [0] * p
    routed = [0] * p
    done = [0] * p
    t = 0.0
    candidates = 0
    slack = lam_bound * (1 + 1e-12)
    while True:
        gaps = (rng.standard_exponential(block) / lam_bound).tolist()
        us = rng.random(block).tolist()
        vs = rng.random(block).tolist()
        for g, u, v in zip(gaps, us, vs):
            t += g
            if t > T:
                break
            candidates += 1
            if const_a:
                a = a_fixed
            else:
                a = [float(x) for x in net.arrival(t, np.array(Q))]
            if const_d:
                d = [d_fixed[i] if Q[i] > 0 else 0.0 for i in range(p)]
            else:
                raw = net.service(t, np.array(Q))
                d = [float(raw[i]) if Q[i] > 0 else 0.0 for i in range(p)]
            total = sum(a) + sum(d)
            if total > slack:
                raise IntensityBoundError(
                    f"total intensity {total} exceeds declared bound {lam_bound}", tuple(Q))
            level = u * lam_bound
            if level >= total:
                continue
            hit = -1
            for i in range(p):
                if level < a[i]:
                    hit = i
                    break
                level -= a[i]
            if hit >= 0:
                Q[hit] += batch[hit]
                external[hit] += batch[hit]
            else:
                for j in range(p):
                    if level < d[j]:
                        hit = j
                        break
                    level -= d[j]
                if hit < 0:
                    hit = p - 1
                Q[hit] -= 1
                done[hit] += 1
                row = P_cum[hit] if const_r else np.cumsum(net.routing(t, np.array(Q))[hit])
                for i in range(p):
                    if v < row[i]:
                        Q[i] += 1
                        routed[i] += 1
                        break
            times.append(t)
            states.extend(Q)
        else:
            continue
        break
    Qarr = np.frombuffer(states, dtype=np.int64 if states.itemsize == 8 else np.int32)
    return QueuePath(np.frombuffer(times, dtype=float).copy(), Qarr.reshape(-1, p).copy(),
                     float(T), np.array(external), np.array(routed), np.array(done), candidates)


def heavy_traffic_rate(mu: float, theta_hat: float, r: float) -> float:
    """Arrival rate mu - theta_hat / r with a fixed limiting scaled drift."""
    lam = mu - theta_hat / r
    if lam < 0:
        raise ParameterError("heavy-traffic arrival rate would be negative")
    return lam


def diffusion_scale(path: QueuePath, r: float, grid) -> np.ndarray:
    """Q(r^2 t) / r evaluated on ``grid``."""
    grid = np.asarray(grid, dtype=float)
    if not r > 0:
        raise ParameterError("scaling index r must be positive")
    if r * r * grid.max() > path.T + 1e-12:
        raise GridError(f"path horizon {path.T} shorter than r^2 T = {r * r * grid.max()}")
    return path.value_at(r * r * grid) / r


@dataclass(frozen=True, eq=False)
class RBMSpec:
    theta: np.ndarray
    Gamma: np.ndarray
    reflection: ReflectionSpec
    x0: np.ndarray | None = None
    initial_samples: np.ndarray | None = None

    def __post_init__(self):
        p = self.reflection.p
        theta = np.asarray(self.theta, dtype=float).ravel()
        G = np.atleast_2d(np.asarray(self.Gamma, dtype=float))
        if theta.size != p or G.shape != (p, p):
            raise DimensionError(f"drift and covariance must match dimension {p}")
        if not np.allclose(G, G.T):
            raise ParameterError("covariance must be symmetric")
        if np.min(np.linalg.eigvalsh(G)) <= 0:
            raise ParameterError("covariance must be positive definite")
        if not self.reflection.completely_s:
            raise ParameterError("reflection matrix must be completely-S")
        x0 = np.zeros(p) if self.x0 is None else np.asarray(self.x0, dtype=float).reshape(p)
        if not self.reflection.domain.contains(x0, tol=0.0):
            raise ParameterError("initial point outside the domain")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "Gamma", G)
        object.__setattr__(self, "x0", x0)
        if self.initial_samples is not None:
            s = np.asarray(self.initial_samples, dtype=float).reshape(-1, p)
            object.__setattr__(self, "initial_samples", s)

    @property
    def p(self) -> int:
        return self.reflection.p

    def stationary_mean_1d(self) -> float:
        if self.p != 1 or self.theta[0] >= 0:
            raise ParameterError("closed form needs a 1-d RBM with negative drift")
        return float(self.Gamma[0, 0] / (2.0 * abs(self.theta[0])))


def _rbm_free_paths(spec: RBMSpec, times, seeds_and_ids):
    seed, ids = seeds_and_ids
    chol = np.linalg.cholesky(spec.Gamma)
    dt = np.diff(times)
    n, M = len(ids), dt.size
    Z = np.empty((n, M + 1, spec.p))
    for row, pid in enumerate(ids):
        rng = path_rng(seed, pid)
        if spec.initial_samples is not None:
            start = spec.initial_samples[rng.integers(spec.initial_samples.shape[0])]
        else:
            start = spec.x0
        inc = rng.standard_normal((M, spec.p)) * np.sqrt(dt)[:, None]
        Z[row, 0] = start
        Z[row, 1:] = start + np.cumsum(inc @ chol.T + spec.theta * dt[:, None], axis=0)
    return Z


def simulate_rbm(spec: RBMSpec, T: float, dt: float, seed: int, path_index: int = 0) -> RegulatedPath:
    """One RBM path: drifted Brownian motion through the Skorohod map."""
    M = int(round(T / dt))
    if M < 1:
        raise GridError("need at least one step")
    times = np.linspace(0.0, T, M + 1)
    z = _rbm_free_paths(spec, times, (seed, [path_index]))[0]
    return skorokhod_solve(z, spec.reflection, times)


def simulate_rbm_ensemble(spec: RBMSpec, T: float, dt: float, n_paths: int, seed: int,
                          first_path: int = 0):
    """Batched RBM paths; returns (times, X, Y) with X of shape (n, M+1, p)."""
    M = int(round(T / dt))
    times = np.linspace(0.0, T, M + 1)
    ids = np.arange(first_path, first_path + n_paths)
    z = _rbm_free_paths(spec, times, (seed, ids))
    X, Y = skorokhod_solve_batch(z, spec.reflection)
    return times, X, Y


def rbm_time_average(spec: RBMSpec, T: float, dt: float, n_paths: int, seed: int,
                     burn_in: float = 0.0, chunk: int = 4):
    """Per-path time averages of X over [burn_in, T], simulated in path chunks."""
    out = []
    for start in range(0, n_paths, chunk):
        k = min(chunk, n_paths - start)
        times, X, _ = simulate_rbm_ensemble(spec, T, dt, k, seed, first_path=start)
        keep = times >= burn_in
        out.append(X[:, keep].mean(axis=1))
    return np.vstack(out)


def boundary_time_process(reg: RegulatedPath, domain, tol: float = BOUNDARY_TOL) -> np.ndarray:
    """Left Riemann sums of time spent on each face, shape (M+1, b)."""
    on = domain.on_face(reg.x, tol).astype(float)
    dt = np.diff(reg.times)
    out = np.zeros((reg.times.size, on.shape[1]))
    out[1:] = np.cumsum(on[:-1] * dt[:, None], axis=0)
    return out


def integrated_autocorrelation_time(x, max_lag: int | None = None) -> float:
    """Sokal-style windowed estimate in units of samples."""
    x = np.asarray(x, dtype=float)
    x = x - x.mean()
    n = x.size
    var = np.dot(x, x) / n
    if var == 0 or n < 4:
        return 1.0
    f = np.fft.rfft(x, 2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n] / (n * var)
    tau = 1.0
    max_lag = n // 2 if max_lag is None else max_lag
    for lag in range(1, max_lag):
        tau += 2.0 * acf[lag]
        if lag >= 5 * tau:
            break
    return max(tau, 1.0)


def _batch_means_se(x, tau):
    n = x.size
    size = max(1, int(math.ceil(2 * tau)))
    nb = n // size
    if nb < 2:
        return float(np.std(x, ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    means = x[: nb * size].reshape(nb, size).mean(axis=1)
    return float(np.std(means, ddof=1) / math.sqrt(nb))


def compare_stationary(a, b, n_boot: int = 200, seed: int = 0, min_taus: float = 10.0) -> dict:
    """Componentwise stationary statistics of two sample series.

    Inputs are (N, p) arrays of time-ordered samples from late windows (or
    1-d arrays).  Confidence intervals use batch means sized from the
    estimated autocorrelation time; the CDF distance is the two-sample
    Kolmogorov statistic with a pooled-bootstrap 95% null quantile.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if a.shape[1] != b.shape[1]:
        raise DimensionError("ensembles have different dimensions")
    rng = np.random.default_rng(seed)
    comps = []
    for j in range(a.shape[1]):
        xa, xb = a[:, j], b[:, j]
        taus = [integrated_autocorrelation_time(xa), integrated_autocorrelation_time(xb)]
        reliable = all(len(x) >= min_taus * tau for x, tau in zip((xa, xb), taus))
        if not reliable:
            warnings.warn(
                f"component {j}: window shorter than {min_taus} autocorrelation times",
                UnreliableWindowWarning,
                stacklevel=2,
            )
        ses = [_batch_means_se(xa, taus[0]), _batch_means_se(xb, taus[1])]
        ks = float(stats.ks_2samp(xa, xb).statistic)
        pooled = np.concatenate([xa, xb])
        thin = max(1, int(round(max(taus))))
        pooled_thin = pooled[::thin]
        na, nb = max(2, xa.size // thin), max(2, xb.size // thin)
        null = []
        for _ in range(n_boot):
            s1 = rng.choice(pooled_thin, na)
            s2 = rng.choice(pooled_thin, nb)
            null.append(stats.ks_2samp(s1, s2).statistic)
        q95 = float(np.quantile(null, 0.95)) if null else math.nan
        ma, mb = float(xa.mean()), float(xb.mean())
        comps.append({
            "mean_a": ma,
            "mean_b": mb,
            "var_a": float(xa.var(ddof=1)),
            "var_b": float(xb.var(ddof=1)),
            "se_a": ses[0],
            "se_b": ses[1],
            "ci_a": [ma - 1.96 * ses[0], ma + 1.96 * ses[0]],
            "ci_b": [mb - 1.96 * ses[1], mb + 1.96 * ses[1]],
            "relative_mean_gap": abs(ma - mb) / max(abs(mb), 1e-300),
            "ks_distance": ks,
            "ks_null_q95": q95,
            "ks_within_null": bool(ks <= q95),
            "autocorrelation_times": taus,
            "reliable_window": reliable,
        })
    return {"components": comps}
