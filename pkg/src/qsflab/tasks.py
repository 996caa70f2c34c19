"""Experiment orchestration: task execution, ensembles, manifests, reports.

Each task runs a reproducible experiment from an ExperimentConfig, writes its
delimited outputs plus a manifest, and reports pass/fail checks with the
tolerances echoed.  Ensembles are computed in fixed-size trajectory batches;
parallel workers each own whole batches and their partial sums are reduced in
batch order, so the results are bit-identical for any parallelism degree.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, ModelConfig, build_model
from .errors import ConfigError
from .gaussian import (
    apply_kernel,
    coefficient_stats,
    estimate_moment,
    propagate_coefficients,
    small_time_coefficients,
)
from .mixed import (
    _batch_increments,
    _linear_master_batch,
    c_trace_norm,
    ensemble_mean_master,
    simulate_nonlinear_master,
    simulate_vectorized_unraveling,
    solve_lindblad,
    spectral_decompose,
    trace_distance,
)
from .operators import check_dissipativity, hermite_values
from .pure import (
    _linear_states_batch,
    _nonlinear_states_batch,
    galerkin_convergence,
    roundtrip_error,
    simulate_linear,
)
from .pure import _batch_increments as _pure_increments
from .sde import derive_seed, n_grid_steps, refine, sample_path
from .serialize import write_csv, write_json, write_pure_trajectory_csv

BATCH_SIZE = 128
MASTER_BATCH_SIZE = 64


@dataclass
class RunManifest:
    """Record of one task run: outputs, checks, provenance."""

    task: str
    config_hash: str
    code_version: str
    master_seed: int
    files: list = field(default_factory=list)
    checks: list = field(default_factory=list)
    wall_time_s: float = 0.0

    @property
    def all_passed(self) -> bool:
        return all(c["passed"] for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "config_hash": self.config_hash,
            "code_version": self.code_version,
            "master_seed": self.master_seed,
            "files": self.files,
            "checks": self.checks,
            "wall_time_s": self.wall_time_s,
        }


def validate_manifest(manifest_path) -> dict:
    """Load a manifest and verify every listed file exists at its length."""
    import json

    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise ConfigError(str(manifest_path), "manifest not found")
    payload = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    for entry in payload.get("files", []):
        target = base / entry["path"]
        if not target.exists():
            raise ConfigError(str(target), "listed output file is missing")
        if target.stat().st_size != entry["bytes"]:
            raise ConfigError(str(target), "listed output file changed size")
    return payload


def _record_files(out_dir: Path, paths) -> list:
    return [{"path": str(Path(p).relative_to(out_dir)),
             "bytes": Path(p).stat().st_size} for p in paths]


def _parallel_map(fn, jobs, parallelism):
    if parallelism <= 1 or len(jobs) <= 1:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(fn, jobs))


# ---------------------------------------------------------------------------
# Initial states
# ---------------------------------------------------------------------------

def initial_vector(params: dict, m: int) -> np.ndarray:
    name = params.get("initial", "ground")
    vec = np.zeros(m, dtype=complex)
    if name == "ground":
        vec[0] = 1.0
    elif name.startswith("basis:"):
        k = int(name.split(":", 1)[1])
        if not 0 <= k < m:
            raise ConfigError("params.initial", f"basis index {k} out of range")
        vec[k] = 1.0
    else:
        raise ConfigError("params.initial", f"unknown initial state {name!r}")
    return vec


def initial_density(params: dict, m: int) -> np.ndarray:
    name = params.get("initial", "ground")
    if name.startswith("mixed:"):
        weights = [float(w) for w in name.split(":", 1)[1].split(",")]
        if any(w < 0 for w in weights) or len(weights) > m:
            raise ConfigError("params.initial", "invalid mixture weights")
        gamma = np.zeros((m, m), dtype=complex)
        total = sum(weights)
        for k, w in enumerate(weights):
            gamma[k, k] = w / total
        return gamma
    vec = initial_vector(params, m)
    return np.outer(vec, vec.conj())


# ---------------------------------------------------------------------------
# Batched ensemble statistics (parallel workers)
# ---------------------------------------------------------------------------

def _pure_stats_batch(job):
    """Per-time sums of |chi|^2 and |C chi|^2 over one batch of trajectories."""
    model, x0, T, dt, master_seed, lo, count, kind, lam2 = job
    n = n_grid_steps(T, dt)
    inc = _pure_increments(model.channels, n, dt, master_seed,
                           np.arange(lo, lo + count))
    if kind == "linear":
        states = _linear_states_batch(model, x0, inc, dt)
    else:
        states, _ = _nonlinear_states_batch(model, x0, inc, dt)
    norm_sq = np.sum(np.abs(states) ** 2, axis=2)
    c_sq = np.einsum("btk,k->bt", np.abs(states) ** 2, lam2)
    return {
        "count": count,
        "sum": norm_sq.sum(axis=0), "sumsq": (norm_sq**2).sum(axis=0),
        "c_sum": c_sq.sum(axis=0), "c_sumsq": (c_sq**2).sum(axis=0),
    }


def _master_stats_batch(job):
    """Trace sums on the full grid and C-norm sums at strided times."""
    model, gamma0, T, dt, master_seed, lo, count, stride, lam = job
    n = n_grid_steps(T, dt)
    inc = _batch_increments(model.channels, n, dt, master_seed,
                            np.arange(lo, lo + count))
    states, traces, _ = _linear_master_batch(model, gamma0, inc, dt, stride)
    from .operators import TruncationLadder

    ladder = TruncationLadder(model.dim, lam)
    c_norms = np.empty(states.shape[:2])
    for b in range(states.shape[0]):
        for k in range(states.shape[1]):
            c_norms[b, k] = c_trace_norm(states[b, k], ladder)
    return {
        "count": count,
        "sum": traces.sum(axis=0), "sumsq": (traces**2).sum(axis=0),
        "c_sum": c_norms.sum(axis=0), "c_sumsq": (c_norms**2).sum(axis=0),
    }


def _reduce_stats(parts):
    out = {}
    for part in parts:
        for key, val in part.items():
            out[key] = out.get(key, 0) + val
    return out


def _mean_se(total, total_sq, n):
    mean = total / n
    var = np.maximum((total_sq - total**2 / n) / max(n - 1, 1), 0.0)
    return mean, np.sqrt(var / n)


def _batch_jobs(n_traj, batch):
    return [(lo, min(batch, n_traj - lo)) for lo in range(0, n_traj, batch)]


def pure_ensemble_stats(model, x0, run, kind="linear", parallelism=None):
    """Mean/SE time series of |chi|^2 and |C chi|^2 over the ensemble."""
    lam2 = model.control.eigenvalues ** 2
    jobs = [(model, x0, run.T, run.dt, run.master_seed, lo, cnt, kind, lam2)
            for lo, cnt in _batch_jobs(run.trajectories, BATCH_SIZE)]
    par = run.parallelism if parallelism is None else parallelism
    stats = _reduce_stats(_parallel_map(_pure_stats_batch, jobs, par))
    n = stats["count"]
    mean, se = _mean_se(stats["sum"], stats["sumsq"], n)
    c_mean, c_se = _mean_se(stats["c_sum"], stats["c_sumsq"], n)
    times = run.dt * np.arange(n_grid_steps(run.T, run.dt) + 1)
    return {"times": times, "mean": mean, "se": se,
            "c_mean": c_mean, "c_se": c_se, "trajectories": n}


def master_ensemble_stats(model, gamma0, run, stride=10, parallelism=None):
    """Mean/SE of tr gamma (full grid) and |gamma|_C (strided)."""
    lam = model.control.eigenvalues
    jobs = [(model, gamma0, run.T, run.dt, run.master_seed, lo, cnt, stride, lam)
            for lo, cnt in _batch_jobs(run.trajectories, MASTER_BATCH_SIZE)]
    par = run.parallelism if parallelism is None else parallelism
    stats = _reduce_stats(_parallel_map(_master_stats_batch, jobs, par))
    n = stats["count"]
    mean, se = _mean_se(stats["sum"], stats["sumsq"], n)
    c_mean, c_se = _mean_se(stats["c_sum"], stats["c_sumsq"], n)
    steps = n_grid_steps(run.T, run.dt)
    times = run.dt * np.arange(steps + 1)
    return {"times": times, "mean": mean, "se": se,
            "recorded_times": times[::stride], "c_mean": c_mean, "c_se": c_se,
            "trajectories": n}


# ---------------------------------------------------------------------------
# Task implementations
# ---------------------------------------------------------------------------

def _check(check_id, passed, **details):
    return {"id": check_id, "passed": bool(passed), "details": details}


def _task_pure_linear(config, model, out_dir):
    params = config.params
    z = float(params.get("z", 4.0))
    allowance = float(params.get("allowance", 0.0))
    chi0 = initial_vector(params, model.dim)
    stats = pure_ensemble_stats(model, chi0, config.run, kind="linear")
    target = float(np.sum(np.abs(chi0) ** 2))
    deviation = np.abs(stats["mean"] - target)
    band = z * stats["se"] + allowance
    checks = [_check(
        "norm-martingale", np.all(deviation <= band),
        z=z, allowance=allowance, worst_deviation=float(np.max(deviation)),
        worst_band=float(np.max(band)), trajectories=stats["trajectories"],
    )]
    files = []
    rate = None
    if params.get("growth_bound", True):
        rate = check_dissipativity(model, seed=derive_seed(
            config.run.master_seed, "dissipativity")).alpha_hat
        rate = max(rate, 1e-12)
        lam2 = model.control.eigenvalues ** 2
        c_start = float(np.sum(lam2 * np.abs(chi0) ** 2))
        bound = np.exp(rate * stats["times"]) * (
            c_start + rate * stats["times"] * (target + 0.0))
        above = stats["c_mean"] - z * stats["c_se"] > bound
        checks.append(_check("c-norm-growth-bound", not np.any(above),
                             alpha=rate, beta=0.0, z=z))
        stats["bound"] = bound
    rows = zip(stats["times"], stats["mean"], stats["se"],
               stats["c_mean"], stats["c_se"],
               stats.get("bound", np.full_like(stats["times"], np.nan)))
    files.append(write_csv(out_dir / "norm_stats.csv",
                           ["t", "mean_norm_sq", "se", "mean_c_norm_sq",
                            "c_se", "c_bound"],
                           ([float(v) for v in row] for row in rows)))
    sample = next(iter_first_trajectory(model, chi0, config.run))
    files.append(write_pure_trajectory_csv(
        out_dir / "trajectory0.csv", sample, stride=config.output.downsample))
    return files, checks, {"alpha_hat": rate}


def iter_first_trajectory(model, chi0, run):
    from .pure import iter_trajectories

    return iter_trajectories(model, chi0, run.T, run.dt, 1, run.master_seed)


def _task_pure_nonlinear(config, model, out_dir):
    params = config.params
    z = float(params.get("z", 4.0))
    phi0 = initial_vector(params, model.dim)
    stats = pure_ensemble_stats(model, phi0, config.run, kind="nonlinear")
    unit_defect = float(np.max(np.abs(stats["mean"] - 1.0)))
    checks = [_check("unit-norm", unit_defect <= 1e-12, defect=unit_defect)]
    rate = max(check_dissipativity(model, seed=derive_seed(
        config.run.master_seed, "dissipativity")).alpha_hat, 1e-12)
    lam2 = model.control.eigenvalues ** 2
    c_start = float(np.sum(lam2 * np.abs(phi0) ** 2))
    bound = np.exp(rate * stats["times"]) * (
        c_start + rate * stats["times"] * (1.0 + 0.0))
    above = stats["c_mean"] - z * stats["c_se"] > bound
    checks.append(_check("c-norm-growth-bound", not np.any(above),
                         alpha=rate, beta=0.0, z=z))
    files = [write_csv(out_dir / "c_norm_stats.csv",
                       ["t", "mean_c_norm_sq", "se", "bound"],
                       ([float(t), float(m), float(s), float(b)] for t, m, s, b in
                        zip(stats["times"], stats["c_mean"], stats["c_se"], bound)))]
    return files, checks, {"alpha_hat": rate}


def _task_equivalence(config, model, out_dir):
    params = config.params
    dts = [float(d) for d in params.get("dts", [4e-3, 2e-3, 1e-3])]
    n_paths = int(params.get("n_paths", 20))
    min_order = float(params.get("min_order", 0.4))
    base_dt = dts[0]
    factors = []
    for d in dts:
        ratio = base_dt / d
        factor = int(round(ratio))
        if abs(ratio - factor) > 1e-9 or (factor & (factor - 1)) != 0:
            raise ConfigError("params.dts", "dts must be dyadic refinements of dts[0]")
        factors.append(factor)
    phi0 = initial_vector(params, model.dim)
    seed = derive_seed(config.run.master_seed, "equivalence")
    errors = np.zeros(len(dts))
    for idx in range(n_paths):
        base = sample_path(model.channels, config.run.T, base_dt, seed, idx)
        for j, factor in enumerate(factors):
            path = base if factor == 1 else refine(base, factor)
            errors[j] += roundtrip_error(model, phi0, path)
    errors /= n_paths
    order = float(np.polyfit(np.log(dts), np.log(errors), 1)[0])
    checks = [
        _check("roundtrip-decreasing", bool(np.all(np.diff(errors) < 0)),
               errors=list(errors)),
        _check("roundtrip-order", order >= min_order, order=order,
               min_order=min_order),
    ]
    files = [write_csv(out_dir / "equivalence.csv", ["dt", "mean_max_error"],
                       ([float(d), float(e)] for d, e in zip(dts, errors)))]
    return files, checks, {"order": order}


def _task_master_linear(config, model, out_dir):
    params = config.params
    z = float(params.get("z", 4.0))
    allowance = float(params.get("allowance", 0.0))
    stride = int(params.get("record_stride", 10))
    gamma0 = initial_density(params, model.dim)
    stats = master_ensemble_stats(model, gamma0, config.run, stride=stride)
    target = float(np.real(np.trace(gamma0)))
    deviation = np.abs(stats["mean"] - target)
    band = z * stats["se"] + allowance
    checks = [_check("trace-martingale", np.all(deviation <= band),
                     z=z, allowance=allowance,
                     worst_deviation=float(np.max(deviation)),
                     trajectories=stats["trajectories"])]
    rate = max(check_dissipativity(model, seed=derive_seed(
        config.run.master_seed, "dissipativity")).alpha_hat, 1e-12)
    c_start = c_trace_norm(gamma0, model.control)
    rec = stats["recorded_times"]
    bound = np.exp(rate * rec) * (c_start + rate * rec * (target + 0.0))
    above = stats["c_mean"] - z * stats["c_se"] > bound
    checks.append(_check("c-trace-growth-bound", not np.any(above),
                         alpha=rate, beta=0.0, z=z))
    files = [
        write_csv(out_dir / "trace_stats.csv", ["t", "mean_trace", "se"],
                  ([float(t), float(m), float(s)] for t, m, s in
                   zip(stats["times"], stats["mean"], stats["se"]))),
        write_csv(out_dir / "c_trace_stats.csv",
                  ["t", "mean_c_norm", "se", "bound"],
                  ([float(t), float(m), float(s), float(b)] for t, m, s, b in
                   zip(rec, stats["c_mean"], stats["c_se"], bound))),
    ]
    return files, checks, {"alpha_hat": rate}


def _task_master_nonlinear(config, model, out_dir):
    params = config.params
    rho0 = initial_density(params, model.dim)
    seed = derive_seed(config.run.master_seed, "master-nonlinear")
    n = config.run.trajectories
    worst_trace = 0.0
    min_eig = 0.0
    finals = []
    for idx in range(n):
        path = sample_path(model.channels, config.run.T, config.run.dt, seed, idx)
        traj = simulate_nonlinear_master(model, rho0, path,
                                         record_stride=int(params.get("record_stride", 10)))
        traces = np.real(np.trace(traj.matrices, axis1=1, axis2=2))
        worst_trace = max(worst_trace, float(np.max(np.abs(traces - 1.0))))
        min_eig = min(min_eig, float(traj.min_eigenvalues().min()))
        finals.append(traj.final())
    finals = np.array(finals)
    checks = [_check("unit-trace", worst_trace <= 1e-10, defect=worst_trace)]
    payload = {"min_eigenvalue": min_eig}
    if params.get("analytic") == "qubit-damping":
        target = float(np.real(rho0[1, 1])) * np.exp(-config.run.T)
        vals = np.real(finals[:, 1, 1])
        se = float(vals.std(ddof=1) / np.sqrt(n))
        dev = abs(float(vals.mean()) - target)
        tol = 3.0 * se + float(params.get("allowance", 0.0))
        checks.append(_check("damping-mean", dev <= tol, deviation=dev,
                             tolerance=tol, target=target))
    files = [write_json(out_dir / "nonlinear_summary.json",
                        {"worst_trace_defect": worst_trace,
                         "min_eigenvalue": min_eig,
                         "mean_final": finals.mean(axis=0)})]
    return files, checks, payload


def _task_unravel(config, model, out_dir):
    params = config.params
    weights = params.get("weights", [0.5, 0.3, 0.2])
    dts = [float(d) for d in params.get("dts", [4e-4, 2e-4, 1e-4])]
    n_paths = int(params.get("n_paths", 8))
    min_order = float(params.get("min_order", 0.4))
    max_distance = params.get("max_distance")
    m = model.dim
    rho0 = np.zeros((m, m), dtype=complex)
    for k, w in enumerate(weights):
        rho0[k, k] = w
    rho0 /= np.real(np.trace(rho0))
    ensemble0 = spectral_decompose(rho0)
    base_dt = dts[0]
    factors = [int(round(base_dt / d)) for d in dts]
    seed = derive_seed(config.run.master_seed, "unravel")
    distances = np.zeros(len(dts))
    for idx in range(n_paths):
        base = sample_path(model.channels, config.run.T, base_dt, seed, idx)
        for j, factor in enumerate(factors):
            path = base if factor == 1 else refine(base, factor)
            unr = simulate_vectorized_unraveling(model, ensemble0, path)
            direct = simulate_nonlinear_master(model, rho0, path)
            gaps = np.linalg.norm(
                (unr.reconstructed.matrices - direct.matrices).reshape(
                    len(direct.times), -1), axis=1)
            distances[j] += float(np.max(gaps))
    distances /= n_paths
    order = float(np.polyfit(np.log(dts), np.log(distances), 1)[0])
    checks = [
        _check("unravel-decreasing", bool(np.all(np.diff(distances) < 0)),
               distances=list(distances)),
        _check("unravel-order", order >= min_order, order=order,
               min_order=min_order),
    ]
    if max_distance is not None:
        checks.append(_check("unravel-distance", distances[-1] <= float(max_distance),
                             distance=float(distances[-1]),
                             max_distance=float(max_distance), dt=dts[-1]))
    files = [write_csv(out_dir / "unravel.csv", ["dt", "mean_max_hs_distance"],
                       ([float(d), float(v)] for d, v in zip(dts, distances)))]
    return files, checks, {"order": order}


def _task_lindblad(config, model, out_dir):
    from .serialize import write_density_jsonl

    params = config.params
    gamma0 = initial_density(params, model.dim)
    traj = solve_lindblad(model, gamma0, config.run.T, config.run.dt)
    trace_drift = float(np.max(np.abs(
        traj.trace_path.values - traj.trace_path.values[0])))
    checks = [_check("trace-preservation", trace_drift <= 1e-10,
                     drift=trace_drift)]
    if params.get("analytic") == "qubit-damping":
        rtol = float(params.get("rtol", 0.01))
        start = float(np.real(gamma0[1, 1]))
        excited = np.real(traj.matrices[:, 1, 1])
        target = start * np.exp(-traj.times)
        rel = float(np.max(np.abs(excited - target))) / max(start, 1e-300)
        checks.append(_check("damping-analytic", rel <= rtol,
                             rel_error=rel, rtol=rtol))
    payload = {}
    if "ensemble_trajectories" in params:
        n = int(params["ensemble_trajectories"])
        z = float(params.get("z", 3.0))
        allowance = float(params.get("allowance", 0.0))
        stride = int(params.get("record_stride", 10))
        run = replace(config.run, trajectories=n)
        stats = ensemble_mean_master(model, gamma0, run.T, run.dt, n,
                                     derive_seed(run.master_seed, "lindblad-mc"),
                                     record_stride=stride)
        reference = traj.matrices[::stride]
        delta = np.abs(stats["mean"] - reference)
        ok = np.all(delta <= z * stats["se"] + allowance)
        checks.append(_check("ensemble-mean-consistency", ok, z=z,
                             allowance=allowance,
                             worst=float(np.max(delta)),
                             trajectories=n))
        payload["ensemble_worst_delta"] = float(np.max(delta))
    files = [
        write_density_jsonl(out_dir / "lindblad.jsonl", traj,
                            stride=config.output.downsample),
        write_csv(out_dir / "lindblad_diag.csv",
                  ["t"] + [f"p_{k}" for k in range(model.dim)],
                  ([float(t)] + [float(np.real(mat[k, k])) for k in range(model.dim)]
                   for t, mat in zip(traj.times, traj.matrices))),
    ]
    return files, checks, payload


def _task_oracle_compare(config, model_unused, out_dir):
    params = config.params
    alpha = float(params.get("alpha", 1.0))
    h = float(params.get("h", 1.0))
    m = int(params.get("dim", config.model.dim))
    tol = float(params.get("l2_tol", 1e-2))
    half_width = float(params.get("grid_half_width", 9.0))
    n_grid = int(params.get("grid_points", 4001))
    from .config import HamiltonianSpec

    model = build_model(ModelConfig(
        dim=m,
        hamiltonian=HamiltonianSpec(kind="kinetic", scale=h / 2.0),
        couplings=(replace(config.model.couplings[0], kind="xp", a=alpha, b=0.0),),
    ))
    chi0 = np.zeros(m, dtype=complex)
    chi0[0] = 1.0
    seed = derive_seed(config.run.master_seed, "oracle-compare")
    path = sample_path(1, config.run.T, config.run.dt, seed)
    traj = simulate_linear(model, chi0, path)
    coeffs = propagate_coefficients(alpha, h, path)
    grid = np.linspace(-half_width, half_width, n_grid)
    f0 = np.pi ** -0.25 * np.exp(-0.5 * grid**2)
    oracle = apply_kernel(coeffs.final, grid, f0)
    galerkin = hermite_values(m, grid).T @ traj.final()
    err = float(np.sqrt(np.trapezoid(np.abs(galerkin - oracle) ** 2, grid)
                        / np.trapezoid(np.abs(oracle) ** 2, grid)))
    checks = [_check("oracle-l2", err <= tol, rel_l2_error=err, tol=tol)]

    # small-time laws of the deterministic pair under dt refinement
    t_small = float(params.get("t_small", 1e-3))
    dt_small = float(params.get("dt_small", 1e-6))
    small_path = sample_path(1, t_small, dt_small,
                             derive_seed(config.run.master_seed, "oracle-small-t"))
    co = propagate_coefficients(alpha, h, small_path)
    om_ref, be_ref = small_time_coefficients(alpha, h, t_small)
    om_err = abs(co.omega[-1] - om_ref) / abs(om_ref)
    be_err = abs(co.beta[-1] - be_ref) / abs(be_ref)
    asym_tol = float(params.get("asymptotics_tol", 1e-3))
    checks.append(_check("small-time-asymptotics",
                         max(om_err, be_err) <= asym_tol,
                         omega_rel_error=float(om_err),
                         beta_rel_error=float(be_err), tol=asym_tol))
    files = [write_csv(out_dir / "oracle_compare.csv",
                       ["x", "re_galerkin", "im_galerkin", "re_oracle", "im_oracle"],
                       ([float(x), float(gk.real), float(gk.imag),
                         float(orc.real), float(orc.imag)]
                        for x, gk, orc in zip(grid, galerkin, oracle)))]
    return files, checks, {"rel_l2_error": err}


def _task_moments(config, model_unused, out_dir):
    params = config.params
    alpha = float(params.get("alpha", 1.0))
    t = float(params.get("t", 0.01))
    n = int(params.get("samples", config.run.trajectories))
    p_values = [float(p) for p in params.get("p_values", [0.5, 1.0, 2.0])]
    tolerances = {float(k): float(v)
                  for k, v in params.get("tolerances", {}).items()}
    seed = derive_seed(config.run.master_seed, "moments")
    rows = []
    checks = []
    for p in p_values:
        result = estimate_moment(p, alpha, t, n, master_seed=seed)
        if hasattr(result, "running_means"):
            rows.append([p, t, n, "running-mean", "", "", int(result.diverged)])
            checks.append(_check(f"moment-divergence-p{p:g}", result.diverged,
                                 running_means=list(result.running_means)))
        else:
            target = 1.0 / (1.0 - p / 2.0)
            rel = abs(result.estimate - target) / target
            rows.append([p, t, n, result.estimator, result.estimate,
                         result.stderr, 0])
            tol = tolerances.get(p)
            if tol is not None:
                checks.append(_check(f"moment-p{p:g}", rel <= tol,
                                     estimate=result.estimate, target=target,
                                     rel_error=rel, tol=tol))
    files = [write_csv(out_dir / "moments.csv",
                       ["p", "t", "samples", "estimator", "estimate",
                        "stderr", "divergence_flag"], rows)]
    return files, checks, {}


def _task_dissipativity(config, model, out_dir):
    report = check_dissipativity(
        model, samples=int(config.params.get("samples", 512)),
        seed=derive_seed(config.run.master_seed, "dissipativity"))
    checks = [_check(f"dissipativity-{name}", ok)
              for name, ok in report.satisfied.items()]
    files = [write_json(out_dir / "dissipativity.json", {
        "alpha_hat": report.alpha_hat,
        "commutator_CH_ratio": report.commutator_CH_ratio,
        "commutator_LC2_ratio": report.commutator_LC2_ratio,
        "K_hat": report.K_hat,
        "commutator_alpha": report.commutator_alpha(),
        "satisfied": report.satisfied,
    })]
    return files, checks, {"alpha_hat": report.alpha_hat}


def _task_convergence(config, model_unused, out_dir):
    params = config.params
    dims = [int(d) for d in params.get("dims", [8, 16, 32, 64])]
    n_paths = int(params.get("n_paths", 50))
    slope_max = float(params.get("slope_max", -0.4))
    models = [build_model(replace(config.model, dim=m)) for m in dims]
    chi0 = initial_vector(params, dims[0])
    seed = derive_seed(config.run.master_seed, "convergence")
    paths = [sample_path(models[0].channels, config.run.T, config.run.dt, seed, i)
             for i in range(n_paths)]
    table = galerkin_convergence(models, chi0, paths)
    checks = [
        _check("convergence-decreasing", table["strictly_decreasing"],
               errors=list(table["errors"])),
        _check("convergence-slope", table["slope"] <= slope_max,
               slope=table["slope"], slope_max=slope_max),
    ]
    files = [write_csv(out_dir / "convergence.csv",
                       ["m", "lambda_m", "mean_sq_error"],
                       ([int(m), float(lam), float(err)] for m, lam, err in
                        zip(table["dims"], table["lambdas"], table["errors"])))]
    return files, checks, {"slope": table["slope"]}


# ---------------------------------------------------------------------------
# Girsanov density identity
# ---------------------------------------------------------------------------

def _girsanov_batch(job):
    model, x0, T, dt, master_seed, lo, count, kind = job
    n = n_grid_steps(T, dt)
    inc = _pure_increments(model.channels, n, dt, master_seed,
                           np.arange(lo, lo + count))
    if kind == "linear":
        states = _linear_states_batch(model, x0, inc, dt)
    else:
        states, _ = _nonlinear_states_batch(model, x0, inc, dt)
    finals = states[:, -1, :]
    norms = np.linalg.norm(finals, axis=1)
    phis = finals / norms[:, None]
    number_op = np.arange(model.dim)
    values = np.stack([
        np.ones(count),
        np.abs(phis[:, 0]) ** 2,
        1.0 / (1.0 + (np.abs(phis) ** 2) @ number_op),
    ])
    weights = norms**2 if kind == "linear" else np.ones(count)
    weighted = values * weights
    return {
        "count": count,
        "wsum": weighted.sum(axis=1), "wsumsq": (weighted**2).sum(axis=1),
    }


GIRSANOV_FUNCTIONALS = ("unit", "ground-overlap", "inverse-excitation")


def girsanov_density_check(config: ExperimentConfig, out_dir=None) -> dict:
    """Two-ensemble test of the measure-change identity.

    The output-picture ensemble estimates E_P[f(chi/|chi|) |chi(T)|^2]; the
    innovation-picture ensemble estimates E_Q[f(phi(T))].  Equality is
    asserted through the two-sample z-score for each bounded functional.
    """
    model = build_model(config.model)
    params = config.params
    z_max = float(params.get("z_max", 4.0))
    chi0 = initial_vector(params, model.dim)
    run = config.run
    results = {}
    for kind, label in (("linear", "output"), ("nonlinear", "innovation")):
        seed = derive_seed(run.master_seed, f"girsanov-{label}")
        jobs = [(model, chi0, run.T, run.dt, seed, lo, cnt, kind)
                for lo, cnt in _batch_jobs(run.trajectories, BATCH_SIZE)]
        stats = _reduce_stats(_parallel_map(_girsanov_batch, jobs, run.parallelism))
        mean, se = _mean_se(stats["wsum"], stats["wsumsq"], stats["count"])
        results[kind] = {"mean": mean, "se": se}
    z_scores = np.abs(results["linear"]["mean"] - results["nonlinear"]["mean"]) / \
        np.sqrt(results["linear"]["se"] ** 2 + results["nonlinear"]["se"] ** 2)
    report = {
        "functionals": list(GIRSANOV_FUNCTIONALS),
        "weighted_mean": results["linear"]["mean"],
        "weighted_se": results["linear"]["se"],
        "direct_mean": results["nonlinear"]["mean"],
        "direct_se": results["nonlinear"]["se"],
        "z_scores": z_scores,
        "z_max": z_max,
        "passed": bool(np.all(z_scores <= z_max)),
        "trajectories_per_ensemble": run.trajectories,
    }
    if out_dir is not None:
        write_csv(Path(out_dir) / "girsanov.csv",
                  ["functional", "weighted_mean", "weighted_se",
                   "direct_mean", "direct_se", "z"],
                  ([name, float(report["weighted_mean"][i]),
                    float(report["weighted_se"][i]),
                    float(report["direct_mean"][i]),
                    float(report["direct_se"][i]), float(z_scores[i])]
                   for i, name in enumerate(GIRSANOV_FUNCTIONALS)))
    return report


def _task_girsanov(config, model, out_dir):
    report = girsanov_density_check(config, out_dir=out_dir)
    checks = [_check(f"girsanov-{name}",
                     report["z_scores"][i] <= report["z_max"],
                     z=float(report["z_scores"][i]), z_max=report["z_max"])
              for i, name in enumerate(GIRSANOV_FUNCTIONALS)]
    files = [out_dir / "girsanov.csv"]
    return files, checks, {}


_TASK_RUNNERS = {
    "pure-linear": _task_pure_linear,
    "pure-nonlinear": _task_pure_nonlinear,
    "equivalence": _task_equivalence,
    "master-linear": _task_master_linear,
    "master-nonlinear": _task_master_nonlinear,
    "unravel": _task_unravel,
    "lindblad": _task_lindblad,
    "oracle-compare": _task_oracle_compare,
    "moments": _task_moments,
    "dissipativity": _task_dissipativity,
    "convergence": _task_convergence,
}


def run(config: ExperimentConfig) -> tuple[RunManifest, Path]:
    """Execute the configured task; write outputs and the manifest.

    Outputs land in <output.directory>/<task>/; given (config, master_seed)
    the data files are byte-identical across reruns and parallelism degrees.
    """
    started = time.time()
    out_dir = Path(config.output.directory) / config.task
    out_dir.mkdir(parents=True, exist_ok=True)
    if config.task == "pure-linear" and config.params.get("girsanov"):
        runner = _task_girsanov
    else:
        runner = _TASK_RUNNERS[config.task]
    model = None
    if config.task not in ("oracle-compare", "moments", "convergence"):
        model = build_model(config.model)
    files, checks, payload = runner(config, model, out_dir)
    manifest = RunManifest(
        task=config.task,
        config_hash=config.config_hash(),
        code_version=__version__,
        master_seed=config.run.master_seed,
        files=_record_files(out_dir, files),
        checks=checks,
        wall_time_s=time.time() - started,
    )
    manifest_path = out_dir / "manifest.json"
    write_json(manifest_path, {**manifest.to_dict(), "extra": payload})
    return manifest, manifest_path


def consolidate(manifest_paths, out_dir, render_figures=True) -> dict:
    """Aggregate manifests into the acceptance table; render figures.

    Returns the consolidated report; writes report.json, report.txt and (by
    default) one figure per plottable task output, next to the data.
    """
    if not manifest_paths:
        raise ConfigError("manifests", "at least one manifest is required")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    payloads = []
    for path in manifest_paths:
        payload = validate_manifest(path)
        payloads.append((Path(path), payload))
        for check in payload["checks"]:
            rows.append({
                "task": payload["task"],
                "check": check["id"],
                "passed": check["passed"],
                "details": check["details"],
            })
    report = {
        "all_passed": all(r["passed"] for r in rows),
        "checks": rows,
        "manifests": [str(p) for p, _ in payloads],
    }
    write_json(out_dir / "report.json", report)
    lines = [f"{'TASK':<18} {'CHECK':<28} {'RESULT':<6}  DETAILS"]
    for r in rows:
        detail = ", ".join(f"{k}={_fmt(v)}" for k, v in r["details"].items()
                           if not isinstance(v, (list, np.ndarray)))
        lines.append(f"{r['task']:<18} {r['check']:<28} "
                     f"{'pass' if r['passed'] else 'FAIL':<6}  {detail}")
    lines.append(f"overall: {'pass' if report['all_passed'] else 'FAIL'}")
    (out_dir / "report.txt").write_text("\n".join(lines) + "\n")
    if render_figures:
        from .figures import render_manifest_figures

        for path, payload in payloads:
            report.setdefault("figures", []).extend(
                str(f) for f in render_manifest_figures(path.parent, payload))
        write_json(out_dir / "report.json", report)
    return report


def _fmt(value):
    if isinstance(value, float):
        return f"{value:.4g}"
    return value
