"""Monte-Carlo experiment runner with CSV outputs.

A run sweeps SNR points and solvers over seeded independent trials; every
solver sees the same scenes and noise (paired comparison).  Results land in
results.csv (and bcrb.csv / EM traces when enabled) plus a JSON manifest of
the resolved configuration.
"""

import configparser
import csv
import json
import os
import time
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from .config import SystemConfig, table_ii_config
from .dictionary import Dictionary, build_uniform_grid
from .model import (Scene, beta_prior, clean_frame, generate_scene,
                    sigma2_for_snr)
from .messages import RowPrior
from .gamp import SolverOptions, run_mp
from .baselines import bg_gamp_frame, omp_frame
from .em import EmOptions, run_em
from . import metrics
from .bcrb import bound_summary

KNOWN_SOLVERS = ("mp", "mp+em", "bg-gamp", "bg-gamp+em", "omp")
OUTPUT_ENV_VAR = "RISLOC_OUT_DIR"


@dataclass
class ExperimentSpec:
    system: SystemConfig = field(default_factory=table_ii_config)
    n_grid_angles: int = 25
    n_grid_delays: int = 25
    scenario: str = "on-grid"              # or "off-grid"
    snr_points: tuple = (0.0, 3.0, 6.0, 9.0, 12.0, 15.0, 18.0)
    trials: int = 500
    solvers: tuple = ("mp",)
    bcrb: bool = False
    seed: int = 0
    output_dir: str = "out"
    em_trace: bool = False
    solver_options: SolverOptions = field(default_factory=SolverOptions)
    em_options: EmOptions = field(default_factory=EmOptions)

    def validate(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.scenario not in ("on-grid", "off-grid"):
            raise ValueError(f"unknown scenario {self.scenario!r}")
        for s in self.solvers:
            if s not in KNOWN_SOLVERS:
                raise ValueError(f"unknown solver {s!r}")
        if not self.solvers and not self.bcrb:
            raise ValueError("nothing to run: no solvers and bcrb disabled")
        if self.n_grid_angles < 2 or self.n_grid_delays < 2:
            raise ValueError("grid needs at least 2 points per axis")
        return self


def _trial_seeds(spec, snr_db, trial):
    """Deterministic per-trial seeds; identical across solvers."""
    root = np.random.SeedSequence(
        (spec.seed, int(round(snr_db * 1000)) & 0x7FFFFFFF, trial))
    return root.spawn(2)


@dataclass
class TrialResult:
    metrics: dict                        # name -> value
    nonconverged: bool = False
    em_trace: list = field(default_factory=list)
    wall_clock: float = 0.0


def _solver_estimates(solver, y, dictionary, prior, sigma2, spec,
                      scene, grid):
    """Run one solver; returns (zeta_hat, detected rows, flags, grid, trace)."""
    k = spec.system.n_devices
    opts = spec.solver_options
    if solver == "mp":
        est = run_mp(y, dictionary, prior, sigma2, opts)
        return (est.zeta_mean, est.top_rows(k), not est.converged,
                grid, [])
    if solver == "bg-gamp":
        est = bg_gamp_frame(y, dictionary, prior.sparsity, prior.beta_mean,
                            prior.beta_var, sigma2, opts)
        return (est.zeta_mean, est.top_rows(k), not est.converged,
                grid, [])
    if solver == "omp":
        zeta = omp_frame(y, dictionary, k_target=k)
        energy = np.sum(np.abs(zeta)**2, axis=1)
        rows = np.argsort(-energy, kind="stable")[:k]
        rows = rows[energy[rows] > 0]
        return zeta, rows, False, grid, []
    if solver in ("mp+em", "bg-gamp+em"):
        em_opts = spec.em_options
        tracer = _em_tracer(scene, spec) if spec.em_trace else None
        solve_fn = None
        if solver == "bg-gamp+em":
            def solve_fn(yy, dd, pp, ss, oo):
                return bg_gamp_frame(yy, dd, pp.sparsity, pp.beta_mean,
                                     pp.beta_var, ss, oo)
        post, state, refined, trace = run_em(
            y, spec.system, grid, scene.pilots, prior, em_opts,
            trace_metrics=tracer, solve_fn=solve_fn)
        rows = np.argsort(-post.row_support, kind="stable")[:k]
        return (post.zeta_mean, rows, state.solver_flags > 0,
                refined.grid, trace)
    raise ValueError(f"unknown solver {solver!r}")


def _em_tracer(scene, spec):
    k = spec.system.n_devices

    def tracer(state, posterior, dictionary):
        rows = np.argsort(-posterior.row_support, kind="stable")[:k]
        assign = metrics.support_match(rows, scene, dictionary.grid,
                                       on_grid=False)
        a_nmse, d_nmse = metrics.angle_distance_nmse(scene, dictionary.grid,
                                                     assign)
        g_nmse = metrics.aligned_gain_nmse(posterior.zeta_mean, scene, assign)
        return {"iteration": state.iteration,
                "objective": state.objective_trace[-1],
                "sigma2": state.sigma2, "rho": state.rho,
                "angle_nmse": a_nmse, "distance_nmse": d_nmse,
                "gain_nmse": g_nmse}
    return tracer


def run_trial(spec: ExperimentSpec, snr_db, trial):
    """One seeded trial: scene, noise, every requested solver, metrics."""
    s_scene, s_noise = _trial_seeds(spec, snr_db, trial)
    cfg = spec.system
    grid = build_uniform_grid(cfg, spec.n_grid_angles, spec.n_grid_delays)
    on_grid = spec.scenario == "on-grid"
    scene = generate_scene(cfg, s_scene, on_grid=on_grid, grid=grid)
    dictionary = Dictionary(grid, scene.pilots, cfg)
    yc = clean_frame(scene, cfg)
    energy = float(np.sum(np.abs(yc)**2))
    sigma2 = sigma2_for_snr(energy, snr_db, cfg)
    rng = np.random.default_rng(s_noise)
    noise = np.sqrt(sigma2 / 2.0) * (rng.standard_normal(yc.shape)
                                     + 1j * rng.standard_normal(yc.shape))
    y = yc + noise
    beta_mean, beta_var = beta_prior(cfg)
    prior = RowPrior(sparsity=cfg.n_devices / grid.n_rows,
                     beta_mean=beta_mean, beta_var=beta_var,
                     phases=cfg.dpsk_phases)
    out = {}
    for solver in spec.solvers:
        t0 = time.perf_counter()
        zeta_hat, rows, flagged, used_grid, trace = _solver_estimates(
            solver, y, dictionary, prior, sigma2, spec, scene, grid)
        wall = time.perf_counter() - t0
        match_on_grid = on_grid and used_grid is grid
        assign = metrics.support_match(rows, scene, used_grid,
                                       on_grid=match_on_grid)
        a_nmse, d_nmse = metrics.angle_distance_nmse(scene, used_grid, assign)
        # payload decoding reads whichever row the detector picked: a one-cell
        # localization error must not scramble the bits, so the bit metric
        # pairs devices with rows by proximity
        assign_ber = metrics.support_match(rows, scene, used_grid,
                                           on_grid=False)
        errs, bits = metrics.ber(zeta_hat, scene, assign_ber, cfg)
        out[solver] = TrialResult(
            metrics={
                "nmse_zeta": metrics.aligned_gain_nmse(zeta_hat, scene, assign),
                "nmse_angle": a_nmse,
                "nmse_distance": d_nmse,
                "ber": errs / bits,
                "missed_devices": float(assign.missed),
                "false_alarms": float(len(assign.false_alarm_rows)),
            },
            nonconverged=flagged, em_trace=trace, wall_clock=wall)
    bounds = None
    if spec.bcrb:
        bounds = bound_summary(scene, cfg, sigma2, beta_mean, beta_var,
                               cfg.dpsk_phases)
    return out, bounds


def _fmt(x):
    return repr(float(x))


def run_experiment(spec: ExperimentSpec):
    """Full sweep; writes CSV files and the manifest, returns the summary."""
    spec.validate()
    out_dir = os.environ.get(OUTPUT_ENV_VAR, spec.output_dir)
    os.makedirs(out_dir, exist_ok=True)
    results_rows = []
    bcrb_rows = []
    partial_failures = 0
    for snr_db in spec.snr_points:
        per_solver = {s: {} for s in spec.solvers}
        flags = {s: 0 for s in spec.solvers}
        bound_acc = {}
        for trial in range(spec.trials):
            try:
                trial_out, bounds = run_trial(spec, snr_db, trial)
            except Exception:
                partial_failures += 1
                continue
            for solver, res in trial_out.items():
                for name, val in res.metrics.items():
                    per_solver[solver].setdefault(name, []).append(val)
                flags[solver] += int(res.nonconverged)
                if res.em_trace:
                    _write_em_trace(out_dir, solver, snr_db, trial,
                                    res.em_trace)
            if bounds is not None:
                for name, val in bounds.items():
                    if isinstance(val, bool):
                        continue
                    bound_acc.setdefault(name, []).append(val)
        for solver in spec.solvers:
            for name, vals in sorted(per_solver[solver].items()):
                arr = np.asarray(vals, dtype=float)
                stderr = (np.std(arr, ddof=1) / np.sqrt(arr.size)
                          if arr.size > 1 else 0.0)
                results_rows.append({
                    "snr_db": _fmt(snr_db), "solver": solver, "metric": name,
                    "mean": _fmt(np.mean(arr)), "stderr": _fmt(stderr),
                    "trials": str(arr.size),
                    "nonconverged_count": str(flags[solver]),
                })
        for name, vals in sorted(bound_acc.items()):
            arr = np.asarray(vals, dtype=float)
            stderr = (np.std(arr, ddof=1) / np.sqrt(arr.size)
                      if arr.size > 1 else 0.0)
            bcrb_rows.append({
                "snr_db": _fmt(snr_db), "solver": "bcrb", "metric": name,
                "mean": _fmt(np.mean(arr)), "stderr": _fmt(stderr),
                "trials": str(arr.size), "nonconverged_count": "0",
            })
    fieldnames = ["snr_db", "solver", "metric", "mean", "stderr", "trials",
                  "nonconverged_count"]
    if spec.solvers:
        _write_csv(os.path.join(out_dir, "results.csv"), fieldnames,
                   results_rows)
    if spec.bcrb:
        _write_csv(os.path.join(out_dir, "bcrb.csv"), fieldnames, bcrb_rows)
    _write_manifest(out_dir, spec)
    return {"results": results_rows, "bcrb": bcrb_rows,
            "partial_failures": partial_failures, "output_dir": out_dir}


def _write_csv(path, fieldnames, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def _write_em_trace(out_dir, solver, snr_db, trial, trace):
    tag = solver.replace("+", "_")
    path = os.path.join(out_dir,
                        f"em_trace_{tag}_snr{snr_db:g}_trial{trial}.csv")
    fields = list(trace[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in trace:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v)
                             for k, v in row.items()})


def _write_manifest(out_dir, spec: ExperimentSpec):
    doc = {
        "seed": spec.seed,
        "scenario": spec.scenario,
        "snr_points": list(spec.snr_points),
        "trials": spec.trials,
        "solvers": list(spec.solvers),
        "bcrb": spec.bcrb,
        "grid": {"angles": spec.n_grid_angles, "delays": spec.n_grid_delays},
        "system": asdict(spec.system),
        "solver_options": asdict(spec.solver_options),
        "em_options": {k: v for k, v in asdict(spec.em_options).items()
                       if k != "solver"},
    }
    with open(os.path.join(out_dir, "run_manifest.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# configuration files: INI-style sections or a JSON document


def _parse_bool(text):
    return str(text).strip().lower() in ("1", "true", "yes", "on")


_SYSTEM_FIELDS = {f: float for f in (
    "subcarrier_spacing", "cp_duration", "wavelength", "reference_phase",
    "angle_min", "angle_max", "distance_min", "distance_max", "gain_tx",
    "gain_rx", "gain_ris", "noise_variance")}
_SYSTEM_FIELDS.update({f: int for f in (
    "n_subcarriers", "n_blocks", "n_tx", "n_rx", "ris_cols", "ris_rows",
    "n_devices", "dpsk_order")})

_SOLVER_FIELDS = {"max_iterations": int, "tolerance": float,
                  "damping": float, "damping_min": float, "var_floor": float,
                  "anneal_ratio": float, "anneal_start": float,
                  "anneal_inner_tol": float, "anneal_inner_max": int,
                  "anneal_reheat": float, "detect_threshold": float}

_EM_FIELDS = {"max_outer": int, "max_inner": int, "inner_tol": float,
              "outer_tol": float, "step_scale": float,
              "step_min_factor": float, "k_guess": int}


def _apply_section(data, fields, builder):
    kwargs = {}
    for key, raw in data.items():
        if key not in fields:
            raise ValueError(f"unknown option {key!r}")
        kwargs[key] = fields[key](raw)
    return builder(**kwargs)


def load_spec(path) -> ExperimentSpec:
    """Read an experiment spec from an INI or JSON file."""
    with open(path) as fh:
        text = fh.read()
    if path.endswith(".json") or text.lstrip().startswith("{"):
        doc = json.loads(text)
        sections = {k: {kk: str(vv) for kk, vv in v.items()}
                    for k, v in doc.items()}
    else:
        parser = configparser.ConfigParser()
        parser.read_string(text)
        sections = {name: dict(parser[name]) for name in parser.sections()}
    system = _apply_section(sections.get("system", {}), _SYSTEM_FIELDS,
                            table_ii_config)
    solver_opts = _apply_section(sections.get("solver", {}), _SOLVER_FIELDS,
                                 SolverOptions)
    em_opts = _apply_section(sections.get("em", {}), _EM_FIELDS, EmOptions)
    em_opts.solver = solver_opts
    exp = sections.get("experiment", {})
    spec = ExperimentSpec(system=system, solver_options=solver_opts,
                          em_options=em_opts)
    if "q" in exp:
        spec.n_grid_angles = int(exp.pop("q"))
    if "u" in exp:
        spec.n_grid_delays = int(exp.pop("u"))
    if "scenario" in exp:
        spec.scenario = exp.pop("scenario").strip()
    if "snr_db" in exp:
        spec.snr_points = tuple(float(s) for s in
                                exp.pop("snr_db").replace(" ", "").split(","))
    if "trials" in exp:
        spec.trials = int(exp.pop("trials"))
    if "solvers" in exp:
        raw = exp.pop("solvers").replace(" ", "")
        spec.solvers = tuple(s for s in raw.split(",") if s)
    if "bcrb" in exp:
        spec.bcrb = _parse_bool(exp.pop("bcrb"))
    if "seed" in exp:
        spec.seed = int(exp.pop("seed"))
    if "output_dir" in exp:
        spec.output_dir = exp.pop("output_dir")
    if "em_trace" in exp:
        spec.em_trace = _parse_bool(exp.pop("em_trace"))
    if exp:
        raise ValueError(f"unknown experiment options: {sorted(exp)}")
    return spec.validate()
