"""Finite-grid non-zero-sum games on top of the FB-SDE solver.

Each player picks one action from a finite list of named feedback maps
u_l(t, x).  A profile's values are the time-0 backward values of the
problem run under the joint control, computed on one shared driver
realization so that profiles are compared with common random numbers.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import _io
from .errors import DimensionError, ParameterError
from .fbsde import FBSDEProblem, SolverConfig, picard_iterate
from .levy import sample_ensemble


@dataclass(frozen=True)
class Action:
    """Named feedback map ``func(t, x) -> (n,)`` or ``(n, k)``."""

    name: str
    func: Callable

    def __call__(self, t, x):
        out = np.asarray(self.func(t, x), dtype=float)
        return out.reshape(x.shape[0], -1)


def constant_action(name: str, value) -> Action:
    value = np.atleast_1d(np.asarray(value, dtype=float))
    return Action(name, lambda t, x: np.broadcast_to(value, (x.shape[0], value.size)))


@dataclass(frozen=True)
class PolicyGrid:
    actions: tuple  # one tuple of Action per player

    def __post_init__(self):
        acts = tuple(tuple(a) for a in self.actions)
        if not acts or any(len(a) == 0 for a in acts):
            raise ParameterError("every player needs at least one action")
        object.__setattr__(self, "actions", acts)

    @property
    def q(self) -> int:
        return len(self.actions)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(a) for a in self.actions)

    def profiles(self) -> list[tuple[int, ...]]:
        return list(itertools.product(*(range(n) for n in self.sizes)))

    def names(self, profile) -> tuple[str, ...]:
        return tuple(self.actions[l][i].name for l, i in enumerate(profile))

    def control(self, profile) -> Callable:
        chosen = [self.actions[l][i] for l, i in enumerate(profile)]
        return lambda t, x: np.hstack([a(t, x) for a in chosen])


@dataclass(frozen=True, eq=False)
class GameResult:
    """Values per profile; column 0 is the sum over players."""

    sizes: tuple[int, ...]
    values: np.ndarray   # (n_profiles, q+1), profiles in lexicographic order
    se: np.ndarray       # (n_profiles, q+1)
    names: tuple = ()
    assumptions: tuple = ("comparison principle assumed, not verified",)

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        n = int(np.prod(sizes))
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (n, len(sizes) + 1):
            raise DimensionError(f"values must have shape ({n}, {len(sizes) + 1})")
        se = np.zeros_like(vals) if self.se is None else np.asarray(self.se, dtype=float)
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "se", se.reshape(vals.shape))

    @classmethod
    def from_table(cls, table, se=None) -> "GameResult":
        """Build from player values of shape (*sizes, q); the total is added exactly."""
        table = np.asarray(table, dtype=float)
        sizes, q = table.shape[:-1], table.shape[-1]
        if len(sizes) != q:
            raise DimensionError("one table axis per player")
        flat = table.reshape(-1, q)
        vals = np.hstack([flat.sum(axis=1, keepdims=True), flat])
        if se is not None:
            s = np.asarray(se, dtype=float).reshape(-1, q)
            se = np.hstack([np.sqrt(np.sum(s**2, axis=1, keepdims=True)), s])
        return cls(sizes, vals, se)

    @property
    def q(self) -> int:
        return len(self.sizes)

    def profiles(self) -> list[tuple[int, ...]]:
        return list(itertools.product(*(range(n) for n in self.sizes)))

    def tensor(self, player: int) -> np.ndarray:
        return self.values[:, player].reshape(self.sizes)

    def pooled_se(self) -> float:
        return float(np.sqrt(np.mean(self.se[:, 1:] ** 2)))

    def to_dict(self) -> dict:
        return {
            "sizes": list(self.sizes),
            "profiles": [list(p) for p in self.profiles()],
            "names": [list(n) for n in self.names],
            "values": self.values.tolist(),
            "se": self.se.tolist(),
            "assumptions": list(self.assumptions),
        }

    def leaderboard_csv(self, path):
        q = self.q
        header = [*[f"a_{l + 1}" for l in range(q)], "V_0",
                  *[f"V_{l + 1}" for l in range(q)], "se_0", *[f"se_{l + 1}" for l in range(q)]]
        order = np.argsort(-self.values[:, 0], kind="stable")
        profs = self.profiles()
        rows = ([*profs[i], *self.values[i], *self.se[i]] for i in order)
        return _io.write_csv(path, header, rows)


def _slack(result: GameResult, eps):
    return 2.0 * result.pooled_se() if eps is None else float(eps)


def find_nash(result: GameResult, eps: float | None = None) -> list[tuple[int, ...]]:
    """Profiles no player can improve by more than ``eps`` through a unilateral change."""
    eps = _slack(result, eps)
    ok = np.ones(result.sizes, dtype=bool)
    for l in range(result.q):
        V = result.tensor(l + 1)
        best = V.max(axis=l, keepdims=True)
        ok &= V >= best - eps
    return [tuple(int(i) for i in idx) for idx in zip(*np.nonzero(ok))]


def find_pareto_nash(result: GameResult, eps: float | None = None,
                     nash: Sequence | None = None) -> list[tuple[int, ...]]:
    """Nash profiles whose total value is within ``eps`` of the grid-wide maximum."""
    eps = _slack(result, eps)
    nash = find_nash(result, eps) if nash is None else list(nash)
    total = result.tensor(0)
    top = total.max()
    return [p for p in nash if total[p] >= top - eps]


def evaluate_values(problem: FBSDEProblem, grid: PolicyGrid, profile, config: SolverConfig,
                    drv=None) -> tuple[np.ndarray, np.ndarray]:
    """Time-0 values (q+1,) and standard errors for one profile.

    The total's standard error combines the players' errors in quadrature.
    """
    if grid.q != problem.coefficients.q:
        raise DimensionError("one action list per value component")
    co = replace(problem.coefficients, control=grid.control(profile))
    prob = replace(problem, coefficients=co)
    sol, _ = picard_iterate(prob, config, drv)
    v = np.asarray(sol.V0, dtype=float)
    s = np.asarray(sol.error(), dtype=float)
    return np.concatenate([[v.sum()], v]), np.concatenate([[math.sqrt(np.sum(s**2))], s])


def solve_game(problem: FBSDEProblem, grid: PolicyGrid, config: SolverConfig = SolverConfig(),
               common_random_numbers: bool = True, workers: int = 1) -> GameResult:
    """Evaluate every profile of the grid."""
    times = np.linspace(0.0, problem.T, config.n_steps + 1)
    drv = sample_ensemble(problem.driver, times, config.n_paths, config.seed) \
        if common_random_numbers else None
    profiles = grid.profiles()

    def run(idx_prof):
        i, prof = idx_prof
        cfg = config if common_random_numbers else replace(config, seed=config.seed + i)
        return evaluate_values(problem, grid, prof, cfg, drv)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            out = list(pool.map(run, enumerate(profiles)))
    else:
        out = [run(item) for item in enumerate(profiles)]
    values = np.array([o[0] for o in out])
    se = np.array([o[1] for o in out])
    return GameResult(grid.sizes, values, se, tuple(grid.names(p) for p in profiles))
