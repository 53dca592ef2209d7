"""Command-line driver for the surfactant free-surface laboratory.

Subcommands
-----------
validate-model   sample the structural assumptions of the configured model
equilibrium      solve for the flat equilibrium concentrations
simulate         time-march the perturbation system (add --linear to drop
                 the quadratic forcings) and write timeseries/checkpoints
spectrum         per-mode eigenvalues of the linearized generator
poincare         pair-Poincare constant with a grid-refinement trace
mms              manufactured-solution convergence suite
report           aggregate a finished run directory into summary JSON

Exit codes: 0 success, 1 domain failure (inadmissible model or mass, solver
breakdown, convergence failure), 2 usage or I/O error (bad flags, unknown
config keys, missing files), 3 guard abort during time stepping.

Configuration is TOML; every recognized key has a default, so all commands
run without a config file.  Unknown keys are rejected rather than ignored so
that typos cannot silently fall back to defaults.  The environment variable
SURFWAVE_THREADS caps worker counts for the embarrassingly parallel
per-mode eigenvalue sweeps.

Determinism: a fixed config and seed reproduce the random initial data draw
bit-for-bit, and the CSV outputs are written with full precision, so repeated
runs produce identical files.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - version shim
    import tomli as tomllib

from . import __version__
from .analysis import (
    AnalysisError,
    mms_convergence,
    poincare_pair_constant,
    spectrum,
    write_spectrum_csv,
)
from .discretization import DiscretizationError, Grid
from .dynamics import (
    DynamicsError,
    FlowState,
    SchemeConfig,
    evaluate_rhs,
    project_initial_data,
    read_checkpoint,
    run,
    write_checkpoint,
)
from .energetics import (
    EnergeticsError,
    attach_balance,
    compute_report,
    fit_decay,
    full_functionals,
    write_timeseries,
)
from .geometry import GeometryError, build_geometry
from .model import (
    ModelError,
    build_aux_functions,
    build_model,
    solve_equilibrium,
    validate_assumptions,
)

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_USAGE = 2
EXIT_GUARD = 3

_DOMAIN_ERRORS = (
    ModelError,
    DiscretizationError,
    GeometryError,
    DynamicsError,
    AnalysisError,
    EnergeticsError,
)


class ConfigError(Exception):
    """Raised for malformed, unknown, or out-of-range configuration input."""


# ----- configuration -------------------------------------------------------------------

#: every accepted dotted key with (type, default).  model.r defaults to the
#: equilibrium surface concentration and init.path has no default, hence None.
_CONFIG_SCHEMA: dict[str, tuple[type, object]] = {
    "domain.L1": (float, 1.0),
    "domain.L2": (float, 1.0),
    "domain.L3": (float, 1.0),
    "grid.N1": (int, 16),
    "grid.N2": (int, 16),
    "grid.Nz": (int, 16),
    "model.omega.type": (str, "langmuir"),
    "model.omega.k1": (float, 1.0),
    "model.omega.k2": (float, 1.0),
    "model.sigma.type": (str, "affine"),
    "model.sigma.a": (float, 2.0),
    "model.sigma.b": (float, 1.0),
    "model.sigma.s": (list, None),
    "model.sigma.values": (list, None),
    "model.r": (float, None),
    "model.quad_tol": (float, 1e-10),
    "physics.beta": (float, 1.0),
    "physics.gamma": (float, 1.0),
    "mass.M": (float, 1.0),
    "init.type": (str, "perturbed"),
    "init.amplitude": (float, 1e-3),
    "init.seed": (int, 2024),
    "init.path": (str, None),
    "time.dt": (float, 1e-3),
    "time.t_end": (float, 1.0),
    "output.dir": (str, "runs/default"),
    "output.interval": (float, 1e-2),
    "output.checkpoint_interval": (float, 0.0),
}

_INIT_TYPES = ("equilibrium", "perturbed", "checkpoint")


def _flatten(tree: dict, prefix: str = "") -> dict[str, object]:
    flat: dict[str, object] = {}
    for key, val in tree.items():
        dotted = f"{prefix}{key}"
        if isinstance(val, dict):
            flat.update(_flatten(val, dotted + "."))
        else:
            flat[dotted] = val
    return flat


@dataclass
class RunConfig:
    """Validated configuration with every key resolved to its final value."""

    values: dict[str, object] = field(default_factory=dict)

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def grid_args(self) -> dict:
        return {
            "L1": self["domain.L1"],
            "L2": self["domain.L2"],
            "L3": self["domain.L3"],
            "N1": self["grid.N1"],
            "N2": self["grid.N2"],
            "Nz": self["grid.Nz"],
        }

    @property
    def model_spec(self) -> dict:
        sigma: dict[str, object] = {"type": self["model.sigma.type"]}
        if self["model.sigma.s"] is not None:
            sigma["s"] = self["model.sigma.s"]
            sigma["values"] = self["model.sigma.values"]
        else:
            sigma["a"] = self["model.sigma.a"]
            sigma["b"] = self["model.sigma.b"]
        return {
            "omega": {
                "type": self["model.omega.type"],
                "k1": self["model.omega.k1"],
                "k2": self["model.omega.k2"],
            },
            "sigma": sigma,
        }

    def echo(self) -> dict:
        return {k: self.values[k] for k in sorted(self.values)}


def load_config(path: str | None, overrides: dict[str, object] | None = None) -> RunConfig:
    """Read TOML, reject unknown keys, apply defaults, and range-check."""
    raw: dict[str, object] = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = _flatten(tomllib.load(fh))
        except OSError as err:
            raise ConfigError(f"cannot read config {path!r}: {err}") from err
        except tomllib.TOMLDecodeError as err:
            raise ConfigError(f"malformed TOML in {path!r}: {err}") from err

    unknown = sorted(set(raw) - set(_CONFIG_SCHEMA))
    if unknown:
        raise ConfigError("unknown config keys: " + ", ".join(unknown))
    if overrides:
        raw.update(overrides)

    values: dict[str, object] = {}
    for key, (typ, default) in _CONFIG_SCHEMA.items():
        if key in raw and raw[key] is not None:
            val = raw[key]
            try:
                if typ is int:
                    if isinstance(val, float) and not val.is_integer():
                        raise ValueError("not an integer")
                    val = int(val)
                elif typ is float:
                    val = float(val)
                elif typ is str:
                    if not isinstance(val, str):
                        raise ValueError("expected a string")
                elif typ is list:
                    val = [float(x) for x in val]
            except (TypeError, ValueError) as err:
                raise ConfigError(f"config key {key}: {err}") from err
            values[key] = val
        else:
            values[key] = default

    _validate_ranges(values)
    return RunConfig(values)


def _validate_ranges(v: dict[str, object]) -> None:
    for key in ("domain.L1", "domain.L2", "domain.L3"):
        if v[key] <= 0:
            raise ConfigError(f"{key} must be positive")
    for key in ("grid.N1", "grid.N2", "grid.Nz"):
        if v[key] < 4:
            raise ConfigError(f"{key} must be at least 4")
    for key in ("grid.N1", "grid.N2"):
        if v[key] % 2:
            raise ConfigError(f"{key} must be even")
    for key in ("physics.beta", "physics.gamma", "mass.M", "time.dt", "model.quad_tol"):
        if v[key] <= 0:
            raise ConfigError(f"{key} must be positive")
    if v["model.r"] is not None and v["model.r"] <= 0:
        raise ConfigError("model.r must be positive")
    for key in ("time.t_end", "init.amplitude", "output.interval", "output.checkpoint_interval"):
        if v[key] < 0:
            raise ConfigError(f"{key} must be nonnegative")
    if v["init.type"] not in _INIT_TYPES:
        raise ConfigError(f"init.type must be one of {_INIT_TYPES}")
    if v["init.type"] == "checkpoint" and not v["init.path"]:
        raise ConfigError("init.type = checkpoint requires init.path")
    if (v["model.sigma.s"] is None) != (v["model.sigma.values"] is None):
        raise ConfigError("model.sigma.s and model.sigma.values must be given together")


def max_workers_hint() -> int | None:
    raw = os.environ.get("SURFWAVE_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        return None
    return n if n >= 1 else None


# ----- problem assembly ----------------------------------------------------------------


def build_problem(cfg: RunConfig):
    """Grid, model, equilibrium, and auxiliary functions from a config."""
    grid = Grid(**cfg.grid_args)
    model = build_model(cfg.model_spec)
    eq = solve_equilibrium(model, cfg["mass.M"], grid.area, grid.volume)
    r = cfg["model.r"] if cfg["model.r"] is not None else eq.c0
    aux = build_aux_functions(model, r, quad_tol=cfg["model.quad_tol"])
    return grid, model, eq, aux


def _band_surface(grid: Grid, rng: np.random.Generator, band: int = 4) -> tuple:
    """Smooth random surface field from modes |n1|, |n2| <= band (not both 0).

    Weight (1 + |n|^2)^-2 keeps the draw dominated by well-resolved modes;
    the result is scaled to unit max amplitude.  Draw order is fixed so the
    field is reproducible for a given generator state.
    """
    x1 = grid.x1[:, None]
    x2 = grid.x2[None, :]
    out = np.zeros(grid.shape_surface)
    for n1 in range(-band, band + 1):
        for n2 in range(-band, band + 1):
            if n1 == 0 and n2 == 0:
                continue
            amp = rng.normal() / (1.0 + n1 * n1 + n2 * n2) ** 2
            phase = rng.uniform(0.0, 2.0 * np.pi)
            out += amp * np.cos(
                2.0 * np.pi * (n1 * x1 / grid.L1 + n2 * x2 / grid.L2) + phase
            )
    return out / np.max(np.abs(out))


def _raw_perturbation(cfg: RunConfig, grid: Grid, eq) -> tuple:
    """Deterministic band-limited shapes at unit scale (before projection).

    The draw order (eta, c, b, u1, u2, u3) is part of the file-format-level
    contract: changing it changes every seeded run.  The surfactant fields
    carry horizontal-mean components (constant in c, a smooth vertical
    profile in b) so the slowest relaxation branch is actually excited; the
    interface amplitude is reduced so capillary energy does not dominate the
    late-time budget.
    """
    rng = np.random.default_rng(cfg["init.seed"])
    band_eta = _band_surface(grid, rng)
    band_c = _band_surface(grid, rng)
    band_b = _band_surface(grid, rng)
    band_u = [_band_surface(grid, rng) for _ in range(3)]

    zcol = grid.x3[None, None, :]
    bprof = np.cos(np.pi * (zcol + grid.L3) / grid.L3)
    zpr = (zcol + grid.L3) ** 2 * np.exp(zcol)

    eta = 0.3 * band_eta
    c = band_c + 0.7
    b = band_b[:, :, None] * bprof + bprof * np.ones(grid.shape_bulk)
    u = np.stack([band_u[i][:, :, None] * zpr * np.ones(grid.shape_bulk) for i in range(3)])
    return u, eta, c, b


def _project_with_mass(grid, eq, model, beta, gamma, u, eta, c, b) -> FlowState:
    """Shift the bulk mean so combined mass hits M exactly, then project."""
    cache = build_geometry(grid, eta - float(np.mean(eta)))
    c_t = eq.c0 + c
    b_t = eq.b0 + b
    ms = grid.int_surface(c_t * cache.sqrt_metric)
    mb = grid.int_bulk(cache.J * b_t)
    vol = grid.int_bulk(cache.J * np.ones(grid.shape_bulk))
    b_t = b_t + (eq.M - ms - mb) / vol
    return project_initial_data(grid, eq, model, beta, gamma, u, eta, c_t, b_t)


def build_initial_state(cfg: RunConfig, grid, model, eq, mode: str) -> FlowState:
    """Initial FlowState per init.type.

    For perturbed data the requested amplitude is the value of the full
    energy functional of the initial state: the raw draw is projected,
    measured, and rescaled (twice, since the geometry couples weakly to the
    scale) so that E_full(0) = init.amplitude.
    """
    beta, gamma = cfg["physics.beta"], cfg["physics.gamma"]
    kind = cfg["init.type"]
    if kind == "equilibrium":
        zs, zb = grid.shape_surface, grid.shape_bulk
        return FlowState(
            grid, eq, model, beta, gamma, 0.0,
            np.zeros((3,) + zb), np.zeros(zb), np.zeros(zs), np.zeros(zs), np.zeros(zb),
        )
    if kind == "checkpoint":
        return read_checkpoint(cfg["init.path"], grid, eq, model, beta, gamma)

    amp = cfg["init.amplitude"]
    if amp == 0.0:
        return build_initial_state(
            RunConfig({**cfg.values, "init.type": "equilibrium"}), grid, model, eq, mode
        )
    u, eta, c, b = _raw_perturbation(cfg, grid, eq)
    scale = math.sqrt(amp)  # fields enter E_full quadratically
    linear = mode == "linear"
    state = None
    for _ in range(3):
        state = _project_with_mass(
            grid, eq, model, beta, gamma, scale * u, scale * eta, scale * c, scale * b
        )
        e_full, _ = full_functionals(state, evaluate_rhs(state, linear=linear))
        if abs(e_full - amp) <= 1e-12 * amp:
            break
        scale *= math.sqrt(amp / e_full)
    return state


# ----- simulate ------------------------------------------------------------------------


class _RunSinks:
    """Collects energy reports and writes checkpoints during a run."""

    def __init__(self, run_dir: str, aux, mode: str):
        self.run_dir = run_dir
        self.aux = aux
        self.mode = mode
        self.rows = []
        self.last_state = None
        self._chk = 0

    def report(self, state, rates):
        self.rows.append(compute_report(state, rates, self.aux, mode=self.mode))
        self.last_state = state

    def checkpoint(self, state):
        path = os.path.join(self.run_dir, f"checkpoint_{self._chk:06d}.dat")
        write_checkpoint(path, state)
        self._chk += 1


def _write_json_atomic(path: str, payload: dict) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")
    os.replace(tmp, path)


def _utc_now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _finite_or_none(x: float):
    return float(x) if math.isfinite(x) else None


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    mode = "linear" if args.linear else "nonlinear"
    run_dir = args.run_dir or cfg["output.dir"]
    os.makedirs(run_dir, exist_ok=True)

    started = _utc_now()
    t0 = time.perf_counter()
    manifest: dict = {
        "version": __version__,
        "config": cfg.echo(),
        "mode": mode,
        "start_time": started,
    }
    manifest_path = os.path.join(run_dir, "manifest.json")

    try:
        grid, model, eq, aux = build_problem(cfg)
        state0 = build_initial_state(cfg, grid, model, eq, mode)
        scheme = SchemeConfig(
            dt=cfg["time.dt"],
            t_end=cfg["time.t_end"],
            mode=mode,
            output_interval=cfg["output.interval"],
            checkpoint_interval=cfg["output.checkpoint_interval"],
        )
        sinks = _RunSinks(run_dir, aux, mode)
        summary = run(state0, scheme, sinks)
    except _DOMAIN_ERRORS as err:
        manifest.update(
            end_time=_utc_now(),
            wall_seconds=time.perf_counter() - t0,
            termination=f"error: {err}",
        )
        _write_json_atomic(manifest_path, manifest)
        print(f"simulate: {err}", file=sys.stderr)
        return EXIT_DOMAIN

    rows = sinks.rows
    if len(rows) >= 7:
        attach_balance(rows)
    write_timeseries(os.path.join(run_dir, "timeseries.csv"), rows)
    if sinks.last_state is not None:
        write_checkpoint(os.path.join(run_dir, "checkpoint_final.dat"), sinks.last_state)

    ts = np.array([r.t for r in rows])
    e_full = np.array([r.E_full for r in rows])
    masses = np.array([r.mass_total for r in rows])
    try:
        lam, r2 = fit_decay(ts, e_full)
        decay = {"lambda_fit": lam, "r_squared": r2}
    except EnergeticsError:
        decay = {"lambda_fit": None, "r_squared": None}

    late = ts >= 0.5 * ts[-1]
    residuals = np.array([r.balance_residual for r in rows])
    with np.errstate(invalid="ignore"):
        bal = np.nanmax(residuals[late]) if np.any(late) and len(rows) >= 7 else math.nan

    manifest.update(
        end_time=_utc_now(),
        wall_seconds=time.perf_counter() - t0,
        termination=summary.termination,
        steps=summary.steps,
        t_final=summary.t_final,
        reports=summary.reports_emitted,
        checkpoints=summary.checkpoints_emitted,
        guard_log=list(summary.guard_log),
        final_report=dict(zip(rows[-1].__dataclass_fields__, rows[-1].row())) if rows else None,
        decay_fit=decay,
        mass_drift_rel=float(np.max(np.abs(masses - eq.M)) / eq.M) if len(rows) else None,
        balance_residual_late_max=_finite_or_none(bal),
        exchange_min=float(np.min([r.exchange_min for r in rows])) if rows else None,
    )
    _write_json_atomic(manifest_path, manifest)

    print(json.dumps({
        "run_dir": run_dir,
        "termination": summary.termination,
        "steps": summary.steps,
        "t_final": summary.t_final,
        "wall_seconds": round(summary.wall_seconds, 3),
        "decay_fit": decay,
    }, indent=2))
    return EXIT_GUARD if summary.termination == "guard_abort" else EXIT_OK


# ----- other subcommands ---------------------------------------------------------------


def cmd_validate_model(args) -> int:
    cfg = load_config(args.config)
    model = build_model(cfg.model_spec)
    report = validate_assumptions(model)
    print(json.dumps({
        "passed": report.passed,
        "min_sigma": report.min_sigma,
        "max_sigma_d1": report.max_sigma_d1,
        "min_f_d1": report.min_f_d1,
        "worst_sign_violation": report.worst_sign_violation,
        "isotherm_residual": report.isotherm_residual,
        "failures": list(report.failures),
    }, indent=2))
    return EXIT_OK if report.passed else EXIT_DOMAIN


def cmd_equilibrium(args) -> int:
    cfg = load_config(args.config)
    grid = Grid(**cfg.grid_args)
    model = build_model(cfg.model_spec)
    eq = solve_equilibrium(model, cfg["mass.M"], grid.area, grid.volume)
    print(json.dumps({
        "M": eq.M,
        "c0": eq.c0,
        "b0": eq.b0,
        "omega_c0": eq.omega_c0,
        "omega_b0": eq.omega_b0,
        "sigma0": eq.sigma0,
        "sigma0_d1": eq.sigma0_d1,
        "f_d1_b0": eq.f_d1_b0,
        "area_Sigma": eq.area_Sigma,
        "vol_Omega": eq.vol_Omega,
    }, indent=2))
    return EXIT_OK


def cmd_spectrum(args) -> int:
    cfg = load_config(args.config)
    grid, model, eq, _ = build_problem(cfg)
    n_list = None
    if args.modes is not None:
        if args.modes < 0:
            raise ConfigError("--modes must be nonnegative")
        kmax = args.modes
        n_list = [
            (int(a), int(b))
            for a in grid.n1
            for b in grid.n2
            if abs(a) <= kmax and abs(b) <= kmax
        ]
    res = spectrum(
        eq, grid,
        n_list=n_list,
        constraints=True,
        beta=cfg["physics.beta"],
        gamma=cfg["physics.gamma"],
        max_workers=max_workers_hint(),
    )
    out_dir = args.run_dir or cfg["output.dir"]
    os.makedirs(out_dir, exist_ok=True)
    write_spectrum_csv(os.path.join(out_dir, "spectrum.csv"), res)
    worst = res.eigenvalues[0]
    print(json.dumps({
        "lambda_gap": res.lambda_gap,
        "max_re_mu": worst.re_mu,
        "slowest_mode": [worst.n1, worst.n2],
        "n_eigenvalues": len(res.eigenvalues),
        "stable": res.lambda_gap > 0,
        "csv": os.path.join(out_dir, "spectrum.csv"),
    }, indent=2))
    return EXIT_OK


def cmd_poincare(args) -> int:
    cfg = load_config(args.config)
    model = build_model(cfg.model_spec)
    trace = []
    for factor in (1, 2):
        g = Grid(
            cfg["domain.L1"], cfg["domain.L2"], cfg["domain.L3"],
            factor * cfg["grid.N1"], factor * cfg["grid.N2"], factor * cfg["grid.Nz"],
        )
        eq = solve_equilibrium(model, cfg["mass.M"], g.area, g.volume)
        pair = poincare_pair_constant(eq, g)
        trace.append({
            "N1": g.N1, "N2": g.N2, "Nz": g.Nz,
            "constant": pair.constant,
            "rayleigh_min": pair.rayleigh_min,
            "mode": list(pair.mode),
        })
    change = abs(trace[1]["constant"] - trace[0]["constant"]) / trace[0]["constant"]
    payload = {
        "constant": trace[0]["constant"],
        "refinement": trace,
        "relative_change": change,
    }
    out_dir = args.run_dir or cfg["output.dir"]
    os.makedirs(out_dir, exist_ok=True)
    _write_json_atomic(os.path.join(out_dir, "poincare.json"), payload)
    print(json.dumps(payload, indent=2))
    return EXIT_OK


def cmd_mms(args) -> int:
    cases = ("extension", "neumann", "stokes", "transport")
    wanted = cases if args.case == "all" else (args.case,)
    results = {}
    worst_final = 0.0
    for case in wanted:
        rows = mms_convergence(case)
        results[case] = [{"N": n, "error": err} for n, err in rows]
        worst_final = max(worst_final, rows[-1][1])
        print(f"{case}:")
        prev = None
        for n, err in rows:
            ratio = "" if prev is None or err == 0 else f"  ratio {prev / err:9.3e}"
            print(f"  N = {n:3d}   error = {err:.6e}{ratio}")
            prev = err
    if args.run_dir:
        os.makedirs(args.run_dir, exist_ok=True)
        _write_json_atomic(os.path.join(args.run_dir, "mms.json"), results)
    ok = worst_final <= 1e-8
    if not ok:
        print(f"mms: final error {worst_final:.3e} exceeds 1e-8", file=sys.stderr)
    return EXIT_OK if ok else EXIT_DOMAIN


def cmd_report(args) -> int:
    ts_path = os.path.join(args.run_dir, "timeseries.csv")
    if not os.path.isfile(ts_path):
        print(f"report: missing {ts_path}", file=sys.stderr)
        return EXIT_USAGE
    with open(ts_path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = [{k: float(v) for k, v in row.items()} for row in reader]
    if not rows:
        print("report: timeseries has no rows", file=sys.stderr)
        return EXIT_USAGE

    ts = np.array([r["t"] for r in rows])
    e_full = np.array([r["E_full"] for r in rows])
    mass = np.array([r["mass_total"] for r in rows])
    resid = np.array([r["balance_residual"] for r in rows])
    ratio_e = np.array([r["ratio_E"] for r in rows])
    ratio_d = np.array([r["ratio_D"] for r in rows])

    try:
        lam, r2 = fit_decay(ts, e_full)
        decay = {"lambda_fit": lam, "r_squared": r2}
    except EnergeticsError:
        decay = {"lambda_fit": None, "r_squared": None}

    late = ts >= 0.5 * ts[-1]
    with np.errstate(invalid="ignore"):
        bal_all = np.nanmax(resid) if np.any(np.isfinite(resid)) else math.nan
        bal_late = (
            np.nanmax(resid[late])
            if np.any(late) and np.any(np.isfinite(resid[late]))
            else math.nan
        )
    mass0 = mass[0]
    brackets = [ratio_e.min(), ratio_e.max(), ratio_d.min(), ratio_d.max()]
    k_bracket = max(max(brackets), 1.0 / min(brackets)) if min(brackets) > 0 else math.inf

    payload = {
        "run_dir": args.run_dir,
        "n_reports": len(rows),
        "t_final": float(ts[-1]),
        "decay_fit": decay,
        "energy": {"E_full_initial": float(e_full[0]), "E_full_final": float(e_full[-1])},
        "mass": {
            "initial": float(mass0),
            "final": float(mass[-1]),
            "max_relative_drift": float(np.max(np.abs(mass - mass0)) / abs(mass0)),
        },
        "exchange_min": float(min(r["exchange_min"] for r in rows)),
        "balance_residual": {
            "max": _finite_or_none(bal_all),
            "max_late_window": _finite_or_none(bal_late),
        },
        "ratio_E": {"min": float(ratio_e.min()), "max": float(ratio_e.max())},
        "ratio_D": {"min": float(ratio_d.min()), "max": float(ratio_d.max())},
        "K_bracket": _finite_or_none(k_bracket),
    }
    _write_json_atomic(os.path.join(args.run_dir, "report.json"), payload)
    print(json.dumps(payload, indent=2))
    return EXIT_OK


# ----- entry point ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="surfwave",
        description="Spectral laboratory for a free surface with soluble surfactant.",
    )
    p.add_argument("--version", action="version", version=f"surfwave {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name: str, func, help_: str, config=True, run_dir=False):
        q = sub.add_parser(name, help=help_)
        if config:
            q.add_argument("--config", metavar="PATH", default=None, help="TOML config file")
        if run_dir:
            q.add_argument("--run-dir", metavar="PATH", default=None, help="output directory")
        q.set_defaults(func=func)
        return q

    add("validate-model", cmd_validate_model, "check structural model assumptions")
    add("equilibrium", cmd_equilibrium, "solve the flat equilibrium")
    sim = add("simulate", cmd_simulate, "time-march the perturbation system", run_dir=True)
    sim.add_argument("--linear", action="store_true", help="drop quadratic forcings")
    spec_p = add("spectrum", cmd_spectrum, "linearized per-mode eigenvalues", run_dir=True)
    spec_p.add_argument("--modes", type=int, default=None, metavar="K",
                        help="restrict to |n1|, |n2| <= K")
    add("poincare", cmd_poincare, "pair-Poincare constant with refinement", run_dir=True)
    mms_p = add("mms", cmd_mms, "manufactured-solution convergence", config=False, run_dir=True)
    mms_p.add_argument("--case", default="all",
                       choices=["all", "extension", "neumann", "stokes", "transport"])
    rep = sub.add_parser("report", help="aggregate a run directory into summary JSON")
    rep.add_argument("--run-dir", metavar="PATH", required=True)
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as err:
        print(f"missing file: {err}", file=sys.stderr)
        return EXIT_USAGE
    except _DOMAIN_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
