"""Command-line front end.

Every subcommand reads one JSON config whose ``kind`` names the subcommand,
writes CSV/JSON artifacts into an output directory and finishes with a
``manifest.json`` that records the config hash, seed, library versions and
a SHA-256 digest of every artifact.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 invariant violation reported by ``validate``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
import time
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__, _io
from .errors import ConfigError, DimensionError, ParameterError, RFBSDEError
from .fbsde import (
    FBSDEProblem,
    SolverConfig,
    picard_iterate,
    problem_from_dict,
    simulate_forward,
    validate_solution,
)
from .games import PolicyGrid, constant_action, find_nash, find_pareto_nash, solve_game
from .levy import LevyDriver, sample_ensemble
from .pde import GridField, HJBCoefficients, feynman_kac_dirichlet_poisson, hjb_generator_eval
from .queueing import QueueNetwork, RBMSpec, simulate_queue, simulate_rbm
from .reflection import (
    Domain,
    skorokhod_fixed_point,
    skorokhod_solve,
    spec_from_dict,
)

OUT_ENV = "RFBSDE_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_INVALID = 0, 2, 3, 4
STOCHASTIC = {"simulate-forward", "solve-fbsde", "queue-sim", "rbm-sim", "feynman-kac",
              "game-solve"}


class ValidationFailed(RFBSDEError):
    pass


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _need(cfg, key):
    if key not in cfg:
        raise ConfigError(f"config is missing {key!r}")
    return cfg[key]


# ---------------------------------------------------------------- builders

def _scalar_map(cfg: dict, p: int):
    """Named scalar maps X (n, p) -> (n,) for terminal and source data."""
    kind = _need(cfg, "kind")
    scale = float(cfg.get("scale", 1.0))
    if kind == "constant":
        return lambda X: np.full(X.shape[0], scale)
    if kind == "quadratic":
        center = np.asarray(cfg.get("center", np.zeros(p)), dtype=float)
        return lambda X: scale * np.sum((X - center) ** 2, axis=1)
    if kind == "linear":
        w = np.asarray(_need(cfg, "weights"), dtype=float).reshape(p)
        return lambda X: scale * (X @ w) + float(cfg.get("const", 0.0))
    if kind == "gaussian":
        center = np.asarray(_need(cfg, "center"), dtype=float).reshape(p)
        width = float(cfg.get("width", 1.0))
        return lambda X: scale * np.exp(-np.sum((X - center) ** 2, axis=1) / (2 * width**2))
    raise ConfigError(f"unknown scalar map kind {kind!r}")


def _mesh_map(fn):
    """Lift an (n, p) map to a meshgrid stack of shape (p, *shape)."""
    return lambda M: fn(M.reshape(M.shape[0], -1).T).reshape(M.shape[1:])


def _axes(cfg_axes):
    return tuple(np.linspace(float(a["lo"]), float(a["hi"]), int(a["n"])) for a in cfg_axes)


def _path_from_cfg(cfg: dict, p: int):
    if "z" in cfg:
        z = np.asarray(cfg["z"], dtype=float).reshape(-1, p)
        times = np.asarray(cfg.get("times", np.linspace(0, 1, z.shape[0])), dtype=float)
        return times, z
    kind = cfg.get("kind", "linear")
    if kind != "linear":
        raise ConfigError(f"unknown path kind {kind!r}")
    T, n = float(cfg.get("T", 1.0)), int(cfg.get("n_steps", 100))
    slope = np.asarray(_need(cfg, "slope"), dtype=float).reshape(p)
    start = np.asarray(cfg.get("start", np.zeros(p)), dtype=float).reshape(p)
    times = np.linspace(0.0, T, n + 1)
    return times, start + times[:, None] * slope


def _solver_config(cfg: dict, args) -> SolverConfig:
    sc = dict(cfg.get("solver", {}))
    if args.seed is not None:
        sc["seed"] = args.seed
    if args.paths is not None:
        sc["n_paths"] = args.paths
    if args.tol is not None:
        sc["tol"] = args.tol
    if args.dt is not None:
        sc["n_steps"] = max(1, int(round(float(cfg["T"]) / args.dt)))
    allowed = set(SolverConfig.__dataclass_fields__)
    extra = set(sc) - allowed
    if extra:
        raise ConfigError(f"unknown solver options {sorted(extra)}")
    return SolverConfig(**sc)


def _rbm_from_cfg(cfg: dict) -> RBMSpec:
    return RBMSpec(np.asarray(_need(cfg, "theta"), dtype=float),
                   np.asarray(_need(cfg, "Gamma"), dtype=float),
                   spec_from_dict(_need(cfg, "reflection")),
                   cfg.get("x0"))


def _controlled_problem(cfg: dict) -> FBSDEProblem:
    """Affine problem plus linear control loadings: b += Bu u, c += Cu u."""
    base = problem_from_dict(cfg)
    co = base.coefficients
    m = int(cfg.get("n_controls", co.q))
    Bu = np.asarray(cfg.get("control_drift", np.zeros((co.p, m))), dtype=float).reshape(co.p, m)
    Cu = np.asarray(cfg.get("control_cost", np.zeros((co.q, m))), dtype=float).reshape(co.q, m)
    b0, c0 = co.b, co.c

    def b(t, x, v, vb, vt, u):
        out = b0(t, x, v, vb, vt, u)
        return out if u is None else out + u @ Bu.T

    def c(t, x, v, vb, vt, u):
        out = c0(t, x, v, vb, vt, u)
        return out if u is None else out + u @ Cu.T

    return replace(base, coefficients=replace(co, b=b, c=c))


# ---------------------------------------------------------------- commands

def cmd_check_matrix(cfg, args, out: Path):
    spec = spec_from_dict(cfg)
    ok, cert = spec.certificate
    payload = {
        "completely_s": ok,
        "witnesses": {",".join(map(str, k)): v for k, v in cert.items()},
        "spectral_radius_condition": spec.spectral_ok if ok else False,
        "p_matrix": spec.p_matrix if ok else False,
        "lcp_constant": spec.lcp_constant if ok else None,
        "spec": spec.to_dict(),
    }
    return [_io.write_json(out / "certificate.json", payload)], None


def cmd_skorokhod(cfg, args, out: Path):
    spec = spec_from_dict(cfg)
    times, z = _path_from_cfg(_need(cfg, "path"), spec.p)
    method = cfg.get("method", "lcp")
    if method == "lcp":
        reg = skorokhod_solve(z, spec, times)
    elif method == "fixed_point":
        reg = skorokhod_fixed_point(z, spec, times, tol=args.tol or 1e-10)
    else:
        raise ConfigError(f"unknown method {method!r}")
    check = reg.check(spec)
    files = [reg.to_csv(out / "path.csv"), _io.write_json(out / "check.json", check)]
    return files, check


def cmd_simulate_forward(cfg, args, out: Path):
    problem = problem_from_dict(cfg)
    sc = _solver_config(cfg, args)
    times = np.linspace(0.0, problem.T, sc.n_steps + 1)
    drv = sample_ensemble(problem.driver, times, sc.n_paths, sc.seed)
    fwd = simulate_forward(problem, drv)
    mx, my = fwd.X.mean(axis=0), fwd.Y.mean(axis=0)
    p, b = mx.shape[1], my.shape[1]
    header = ["t", *[f"mean_x_{i + 1}" for i in range(p)], *[f"mean_y_{i + 1}" for i in range(b)]]
    rows = (np.concatenate([[t], mx[k], my[k]]) for k, t in enumerate(times))
    summary = {"n_paths": sc.n_paths, "n_steps": sc.n_steps, "seed": sc.seed,
               "mean_X_T": mx[-1], "mean_Y_T": my[-1]}
    return [_io.write_csv(out / "forward_mean.csv", header, rows),
            _io.write_json(out / "forward.json", summary)], None


def cmd_solve_fbsde(cfg, args, out: Path):
    problem = problem_from_dict(cfg)
    sc = _solver_config(cfg, args)
    sol, diag = picard_iterate(problem, sc)
    report = validate_solution(sol, problem)
    payload = {**sol.summary(), "diagnostics": diag.to_dict(), "validation": report}
    V = sol.V.mean(axis=0)
    header = ["t", *[f"mean_v_{l + 1}" for l in range(V.shape[1])]]
    rows = (np.concatenate([[t], V[k]]) for k, t in enumerate(sol.times))
    return [_io.write_json(out / "solution.json", payload),
            _io.write_csv(out / "value_mean.csv", header, rows)], report


def cmd_queue_sim(cfg, args, out: Path):
    net = QueueNetwork.from_dict(_need(cfg, "network"))
    seed = args.seed if args.seed is not None else cfg["seed"]
    T = float(_need(cfg, "T"))
    path = simulate_queue(net, T, seed)
    burn = float(cfg.get("burn_in", 0.0))
    sample_dt = float(args.dt or cfg.get("sample_dt", T / 1000))
    grid = np.arange(0.0, T + 0.5 * sample_dt, sample_dt)
    grid = grid[grid <= T]
    Q = path.value_at(grid)
    header = ["t", *[f"q_{i + 1}" for i in range(net.p)]]
    summary = {
        "T": T, "seed": seed, "n_events": path.n_events, "n_candidates": path.n_candidates,
        "time_average": path.time_average(burn), "throughput": path.throughput(),
        "external": path.external, "routed_in": path.routed_in,
        "completions": path.completions, "final": path.Q[-1],
    }
    return [_io.write_csv(out / "queue.csv", header, np.column_stack([grid, Q])),
            _io.write_json(out / "queue.json", summary)], None


def cmd_rbm_sim(cfg, args, out: Path):
    rbm = _rbm_from_cfg(cfg)
    seed = args.seed if args.seed is not None else cfg["seed"]
    dt = float(args.dt or cfg.get("dt", 0.01))
    reg = simulate_rbm(rbm, float(_need(cfg, "T")), dt, seed)
    check = reg.check(rbm.reflection)
    summary = {"seed": seed, "dt": dt, "mean_x": reg.x.mean(axis=0), "y_T": reg.y[-1],
               "check": check}
    return [reg.to_csv(out / "rbm.csv"), _io.write_json(out / "rbm.json", summary)], check


def cmd_feynman_kac(cfg, args, out: Path):
    x0 = np.atleast_1d(np.asarray(_need(cfg, "x0"), dtype=float))
    p = x0.size
    seed = args.seed if args.seed is not None else cfg["seed"]
    H = _scalar_map(_need(cfg, "H"), p)
    g_cfg = cfg.get("g")
    g = None if g_cfg is None else (lambda fn: (lambda t, X: fn(X)))(_scalar_map(g_cfg, p))
    dom = None
    if cfg.get("domain"):
        d = cfg["domain"]
        dom = Domain.hyperbox(d["upper"]) if d.get("kind") == "hyperbox" else Domain.orthant(p)
    res = feynman_kac_dirichlet_poisson(
        H, x0, float(_need(cfg, "T")), int(args.paths or cfg.get("n_paths", 10_000)),
        float(args.dt or cfg.get("dt", 0.01)), seed, g=g, domain=dom,
        sigma=cfg.get("sigma"), b=cfg.get("b"),
        half_laplacian=bool(cfg.get("half_laplacian", True)),
        source_sign=float(cfg.get("source_sign", -1.0)))
    return [_io.write_json(out / "estimate.json", {**res.to_dict(), "seed": seed})], None


def cmd_hjb_eval(cfg, args, out: Path):
    axes = _axes(_need(cfg, "axes"))
    p = len(axes)
    q = int(cfg.get("q", 1))
    fields = [_scalar_map(f, p) for f in _need(cfg, "fields")]
    if len(fields) != q:
        raise ConfigError("need one field map per player")

    def tab(t, M):
        vals = np.stack([_mesh_map(f)(M) for f in fields])
        return np.concatenate([vals.sum(axis=0, keepdims=True), vals])

    t0 = float(cfg.get("t", 0.0))
    field = GridField.from_function(axes, [t0], tab)
    driver = LevyDriver.from_dict(cfg.get("driver", {"d": p}))
    d = driver.d
    sig = np.asarray(cfg.get("sigma", np.zeros((p, d))), dtype=float).reshape(p, d)
    bvec = np.asarray(cfg.get("b", np.zeros(p)), dtype=float).reshape(p)
    cvec = np.asarray(cfg.get("c", np.zeros(q)), dtype=float).reshape(q)
    eta = np.asarray(cfg.get("eta", np.zeros((p, driver.h))), dtype=float).reshape(p, driver.h)
    coeffs = HJBCoefficients(
        p, q, d, driver,
        b=lambda t, x, u: bvec, sigma=lambda t, x, u: sig, c=lambda t, x, u: cvec,
        eta=lambda t, x, u, z, j: eta[:, j] * z)
    half = bool(cfg.get("half_laplacian", False))
    pts = np.asarray(_need(cfg, "points"), dtype=float).reshape(-1, p)
    vals = [hjb_generator_eval(field, coeffs, None, t0, x, half_laplacian=half) for x in pts]
    payload = {"t": t0, "points": pts, "values": vals}
    return [_io.write_json(out / "generator.json", payload)], None


def cmd_game_solve(cfg, args, out: Path):
    problem = _controlled_problem(cfg)
    sc = _solver_config(cfg, args)
    players = _need(cfg, "actions")
    grid = PolicyGrid(tuple(tuple(constant_action(a["name"], a["value"]) for a in acts)
                            for acts in players))
    result = solve_game(problem, grid, sc, workers=max(1, int(args.threads or 1)))
    eps = cfg.get("eps")
    nash = find_nash(result, eps)
    pareto = find_pareto_nash(result, eps, nash)
    payload = {**result.to_dict(), "seed": sc.seed, "nash": nash, "pareto_nash": pareto,
               "eps": 2.0 * result.pooled_se() if eps is None else eps}
    return [_io.write_json(out / "game.json", payload),
            result.leaderboard_csv(out / "leaderboard.csv")], None


def cmd_validate(cfg, args, out: Path):
    inner = dict(_need(cfg, "run"))
    kind = inner.get("kind")
    if kind not in ("skorokhod", "solve-fbsde", "rbm-sim"):
        raise ConfigError("validate runs a skorokhod, solve-fbsde or rbm-sim config")
    files, report = COMMANDS[kind](inner, args, out)
    files.append(_io.write_json(out / "validation.json", report))
    if not report.get("ok", False):
        raise ValidationFailed(f"invariant violations: {report.get('violations', report)}")
    return files, report


COMMANDS = {
    "check-matrix": cmd_check_matrix,
    "skorokhod": cmd_skorokhod,
    "simulate-forward": cmd_simulate_forward,
    "solve-fbsde": cmd_solve_fbsde,
    "queue-sim": cmd_queue_sim,
    "rbm-sim": cmd_rbm_sim,
    "feynman-kac": cmd_feynman_kac,
    "hjb-eval": cmd_hjb_eval,
    "game-solve": cmd_game_solve,
    "validate": cmd_validate,
}


# ---------------------------------------------------------------- driver

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rfbsde", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON config file")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>-<hash>)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--paths", type=int)
        sp.add_argument("--dt", type=float)
        sp.add_argument("--tol", type=float)
        sp.add_argument("--threads", type=int)
    return parser


def _load_config(path, command) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    if cfg.get("kind") != command:
        raise ConfigError(f"config kind {cfg.get('kind')!r} does not match {command!r}")
    return cfg


def _check_overrides(args):
    for name in ("paths", "dt", "tol", "threads"):
        v = getattr(args, name)
        if v is not None and not v > 0:
            raise ConfigError(f"--{name} must be positive")


def _stochastic(cfg, command):
    if command == "validate":
        return cfg.get("run", {}).get("kind") in STOCHASTIC
    return command in STOCHASTIC


def _seed_of(cfg, args, command):
    if args.seed is not None:
        return args.seed
    inner = cfg.get("run", cfg) if command == "validate" else cfg
    return inner.get("seed", inner.get("solver", {}).get("seed"))


def _manifest(out: Path, cfg, command, seed, files, status):
    entries = [{"path": str(Path(f).relative_to(out)), "sha256": _sha256(Path(f))}
               for f in files if Path(f).exists()]
    payload = {
        "command": command,
        "config_hash": config_hash(cfg),
        "seed": seed,
        "status": status,
        "versions": {"rfbsde": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__, "python": platform.python_version()},
        "artifacts": entries,
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    return _io.write_json(out / "manifest.json", payload)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    command = args.command
    cfg = None
    out = None
    files: list = []
    try:
        cfg = _load_config(args.config, command)
        _check_overrides(args)
        seed = _seed_of(cfg, args, command)
        if _stochastic(cfg, command) and seed is None:
            raise ConfigError("a seed is required (config 'seed' or --seed)")
        if command == "validate":
            cfg["run"] = {**cfg["run"], "seed": seed} if seed is not None else cfg["run"]
        elif seed is not None and "seed" not in cfg and command in ("queue-sim", "rbm-sim",
                                                                   "feynman-kac"):
            cfg = {**cfg, "seed": seed}
        root = Path(os.environ.get(OUT_ENV, "rfbsde-out"))
        out = Path(args.out) if args.out else root / f"{command}-{config_hash(cfg)[:12]}"
        out.mkdir(parents=True, exist_ok=True)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            files, _ = COMMANDS[command](cfg, args, out)
        _manifest(out, cfg, command, seed, files, "ok")
        print(str(out))
        return EXIT_OK
    except ValidationFailed as exc:
        print(f"validate: {exc}", file=sys.stderr)
        if out is not None:
            files = sorted(p for p in out.iterdir() if p.name != "manifest.json")
            _manifest(out, cfg, command, _seed_of(cfg, args, command), files, "invalid")
        return EXIT_INVALID
    except (ConfigError, ParameterError, DimensionError, KeyError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RFBSDEError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main():
    sys.exit(run())
