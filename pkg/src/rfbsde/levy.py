"""Brownian and finite-activity Levy driving noise.

Each jump component i is a compound Poisson process with rate lam_i and
positive i.i.d. marks drawn from a parametric law nu_i on (0, inf).
Compensated integrals subtract lam_i * dt * int f d(nu_i) analytically.

Every path draws from its own counter-based substream keyed by
(seed, path index), so an ensemble is independent of generation order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import _io
from .errors import GridError, ParameterError, UnsupportedIntegrandError


@dataclass(frozen=True)
class Exponential:
    mean: float

    def __post_init__(self):
        if not self.mean > 0:
            raise ParameterError("exponential mark mean must be positive")

    def first_moment(self) -> float:
        return self.mean

    def second_moment(self) -> float:
        return 2.0 * self.mean**2

    def sample(self, rng, size):
        return rng.exponential(self.mean, size)

    def quadrature(self, n: int = 20):
        x, w = np.polynomial.laguerre.laggauss(n)
        return x * self.mean, w

    def to_dict(self):
        return {"law": "exponential", "mean": self.mean}


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float

    def __post_init__(self):
        if not (0 <= self.low < self.high < np.inf):
            raise ParameterError("uniform marks need 0 <= low < high")

    def first_moment(self) -> float:
        return 0.5 * (self.low + self.high)

    def second_moment(self) -> float:
        a, b = self.low, self.high
        return (a * a + a * b + b * b) / 3.0

    def sample(self, rng, size):
        return rng.uniform(self.low, self.high, size)

    def quadrature(self, n: int = 20):
        x, w = np.polynomial.legendre.leggauss(n)
        half = 0.5 * (self.high - self.low)
        return self.low + half * (x + 1.0), 0.5 * w

    def to_dict(self):
        return {"law": "uniform", "low": self.low, "high": self.high}


@dataclass(frozen=True)
class PointMass:
    value: float

    def __post_init__(self):
        if not self.value > 0:
            raise ParameterError("point-mass mark must be positive")

    def first_moment(self) -> float:
        return self.value

    def second_moment(self) -> float:
        return self.value**2

    def sample(self, rng, size):
        return np.full(size, float(self.value))

    def quadrature(self, n: int = 1):
        return np.array([float(self.value)]), np.array([1.0])

    def to_dict(self):
        return {"law": "point", "value": self.value}


MarkLaw = Exponential | Uniform | PointMass


def mark_law_from_dict(cfg: dict) -> MarkLaw:
    law = cfg.get("law")
    if law == "exponential":
        return Exponential(float(cfg["mean"]))
    if law == "uniform":
        return Uniform(float(cfg["low"]), float(cfg["high"]))
    if law == "point":
        return PointMass(float(cfg["value"]))
    raise ParameterError(f"unknown mark law {law!r}")


@dataclass(frozen=True)
class LevyDriver:
    d: int
    rates: tuple[float, ...] = ()
    marks: tuple[MarkLaw, ...] = ()

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 0:
            raise ParameterError("Brownian dimension must be a nonnegative integer")
        object.__setattr__(self, "rates", tuple(float(r) for r in self.rates))
        object.__setattr__(self, "marks", tuple(self.marks))
        if len(self.rates) != len(self.marks):
            raise ParameterError("one mark law per jump component")
        if any(not (r > 0 and np.isfinite(r)) for r in self.rates):
            raise ParameterError("jump rates must be positive and finite")

    @property
    def h(self) -> int:
        return len(self.rates)

    @property
    def lam(self) -> np.ndarray:
        return np.asarray(self.rates, dtype=float)

    def mark_means(self) -> np.ndarray:
        return np.array([m.first_moment() for m in self.marks])

    def mark_second_moments(self) -> np.ndarray:
        return np.array([m.second_moment() for m in self.marks])

    def to_dict(self):
        return {"d": self.d, "rates": list(self.rates), "marks": [m.to_dict() for m in self.marks]}

    @classmethod
    def from_dict(cls, cfg: dict) -> "LevyDriver":
        marks = tuple(mark_law_from_dict(m) for m in cfg.get("marks", []))
        return cls(int(cfg.get("d", 1)), tuple(cfg.get("rates", [])), marks)


def check_grid(times) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size < 2:
        raise GridError("time grid needs at least two points")
    if np.any(np.diff(times) <= 0):
        raise GridError("time grid must be strictly increasing")
    return times


def path_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based generator for path ``index`` of the ensemble keyed by ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(index),))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True, eq=False)
class PathGrid:
    times: np.ndarray
    dW: np.ndarray
    jump_step: np.ndarray
    jump_comp: np.ndarray
    jump_mark: np.ndarray
    compensator: np.ndarray
    driver: LevyDriver

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    def mark_sums(self) -> np.ndarray:
        out = np.zeros((self.n_steps, self.driver.h))
        np.add.at(out, (self.jump_step, self.jump_comp), self.jump_mark)
        return out

    def counts(self) -> np.ndarray:
        out = np.zeros((self.n_steps, self.driver.h), dtype=np.int64)
        np.add.at(out, (self.jump_step, self.jump_comp), 1)
        return out

    def to_csv(self, path):
        d, h = self.driver.d, self.driver.h
        sums = self.mark_sums()
        header = ["t", *[f"dW_{j + 1}" for j in range(d)], *[f"jumps_{i + 1}" for i in range(h)],
                  *[f"compensator_{i + 1}" for i in range(h)]]
        rows = (
            [self.times[k + 1], *self.dW[k], *sums[k], *self.compensator[k]]
            for k in range(self.n_steps)
        )
        return _io.write_csv(path, header, rows)


def _draw(driver: LevyDriver, dt: np.ndarray, rng: np.random.Generator):
    M = dt.size
    dW = rng.standard_normal((M, driver.d)) * np.sqrt(dt)[:, None]
    if driver.h == 0:
        empty = np.zeros(0, dtype=np.int64)
        return dW, empty, empty, np.zeros(0)
    counts = rng.poisson(driver.lam[None, :] * dt[:, None])
    step, comp = np.nonzero(counts)
    reps = counts[step, comp]
    step = np.repeat(step, reps)
    comp = np.repeat(comp, reps)
    marks = np.empty(step.size)
    for i, law in enumerate(driver.marks):
        sel = comp == i
        marks[sel] = law.sample(rng, int(sel.sum()))
    return dW, step, comp, marks


def sample_path_grid(driver: LevyDriver, times, seed: int, path_index: int = 0) -> PathGrid:
    times = check_grid(times)
    dt = np.diff(times)
    dW, step, comp, marks = _draw(driver, dt, path_rng(seed, path_index))
    comp_mean = driver.lam * driver.mark_means() if driver.h else np.zeros(0)
    compensator = dt[:, None] * comp_mean[None, :]
    return PathGrid(times, dW, step, comp, marks, compensator, driver)


@dataclass(frozen=True, eq=False)
class DriverEnsemble:
    """Stacked driver increments for ``n`` paths on one grid."""

    times: np.ndarray
    dW: np.ndarray          # (n, M, d)
    mark_sums: np.ndarray   # (n, M, h)
    counts: np.ndarray      # (n, M, h)
    compensator: np.ndarray  # (M, h), for f(z) = z
    driver: LevyDriver
    seed: int
    path_ids: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.dW.shape[0]

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def compensated(self) -> np.ndarray:
        """Compensated mark increments, sum z - lam dt E[z], shape (n, M, h)."""
        return self.mark_sums - self.compensator[None]

    def subset(self, idx) -> "DriverEnsemble":
        idx = np.asarray(idx)
        return DriverEnsemble(self.times, self.dW[idx], self.mark_sums[idx], self.counts[idx],
                              self.compensator, self.driver, self.seed, self.path_ids[idx])


def sample_ensemble(driver: LevyDriver, times, n_paths: int, seed: int,
                    path_ids=None) -> DriverEnsemble:
    times = check_grid(times)
    if path_ids is None:
        path_ids = np.arange(n_paths)
    path_ids = np.asarray(path_ids, dtype=np.int64)
    n = path_ids.size
    dt = np.diff(times)
    M = dt.size
    dW = np.empty((n, M, driver.d))
    sums = np.zeros((n, M, driver.h))
    counts = np.zeros((n, M, driver.h), dtype=np.int64)
    for row, pid in enumerate(path_ids):
        w, step, comp, marks = _draw(driver, dt, path_rng(seed, pid))
        dW[row] = w
        if step.size:
            np.add.at(sums[row], (step, comp), marks)
            np.add.at(counts[row], (step, comp), 1)
    comp_mean = driver.lam * driver.mark_means() if driver.h else np.zeros(0)
    return DriverEnsemble(times, dW, sums, counts, dt[:, None] * comp_mean[None, :], driver,
                          int(seed), path_ids)


@dataclass(frozen=True)
class Affine:
    """f(z) = intercept + slope * z."""

    intercept: float = 0.0
    slope: float = 1.0

    def __call__(self, z):
        return self.intercept + self.slope * np.asarray(z, dtype=float)

    def nu_mean(self, law: MarkLaw) -> float:
        return self.intercept + self.slope * law.first_moment()


@dataclass(frozen=True)
class Tabulated:
    """User integrand with its nu_i-integral supplied per jump component."""

    func: Callable
    nu_means: Sequence[float]

    def __call__(self, z):
        return np.asarray(self.func(np.asarray(z, dtype=float)), dtype=float)

    def nu_mean(self, law: MarkLaw, component: int) -> float:
        return float(self.nu_means[component])


def _nu_mean(integrand, law, component):
    if isinstance(integrand, Affine):
        return integrand.nu_mean(law)
    if isinstance(integrand, Tabulated):
        return integrand.nu_mean(law, component)
    raise UnsupportedIntegrandError(
        f"no closed-form compensator for {type(integrand).__name__}; "
        "use Affine or Tabulated"
    )


def compensated_increment(grid: PathGrid, k: int, integrand) -> np.ndarray:
    """sum over step-k jumps of f(z) minus lam_i dt_k int f d(nu_i), per component.

    ``integrand`` is one Affine/Tabulated object shared by all components or
    a sequence with one per component.
    """
    h = grid.driver.h
    per_comp = list(integrand) if isinstance(integrand, (list, tuple)) else [integrand] * h
    if len(per_comp) != h:
        raise ParameterError("need one integrand per jump component")
    if not 0 <= k < grid.n_steps:
        raise GridError(f"step {k} outside grid")
    dt = grid.dt[k]
    out = np.zeros(h)
    sel = grid.jump_step == k
    for i, (f, law) in enumerate(zip(per_comp, grid.driver.marks)):
        mean = _nu_mean(f, law, i)
        zs = grid.jump_mark[sel & (grid.jump_comp == i)]
        out[i] = float(np.sum(f(zs))) - grid.driver.rates[i] * dt * mean
    return out


def compensated_totals(grid: PathGrid, integrand) -> np.ndarray:
    """Compensated integral of f over the whole grid, per component."""
    return sum(compensated_increment(grid, k, integrand) for k in range(grid.n_steps))
