"""Experiment configuration: TOML or JSON, validated into typed blocks.

The model block names one of the standard constructions (reference-operator
Hamiltonian, kinetic Hamiltonians, named potentials; position/momentum or
lowering couplings).  The run block fixes the grid, ensemble size, master
seed and parallelism.  Tasks select which experiment the harness executes.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .operators import (
    ModelSpec,
    TruncatedOperator,
    build_coupling,
    build_hamiltonian,
    build_momentum,
    build_oscillator_ladder,
    detect_band_width,
    potential_matrix,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

TASKS = (
    "pure-linear", "pure-nonlinear", "equivalence",
    "master-linear", "master-nonlinear", "unravel", "lindblad",
    "oracle-compare", "moments", "dissipativity", "convergence",
)

POTENTIALS = {
    "zero": lambda x: 0.0 * x,
    "quadratic": lambda x: x**2,
    "cos": np.cos,
    "lorentzian": lambda x: 1.0 / (1.0 + x**2),
}


@dataclass(frozen=True)
class HamiltonianSpec:
    kind: str = "oscillator"
    scale: float = 1.0
    potential: str | None = None


@dataclass(frozen=True)
class CouplingSpec:
    kind: str = "xp"
    a: float = 1.0
    b: float = 0.0
    scale: float = 1.0


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 16
    hamiltonian: HamiltonianSpec = HamiltonianSpec()
    couplings: tuple = (CouplingSpec(),)
    control_power: int = 1

    @property
    def channels(self) -> int:
        return len(self.couplings)


@dataclass(frozen=True)
class RunConfig:
    T: float = 0.2
    dt: float = 1e-3
    trajectories: int = 100
    master_seed: int = 0
    parallelism: int = 1


@dataclass(frozen=True)
class OutputConfig:
    directory: str = "out"
    formats: tuple = ("csv", "json")
    downsample: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    task: str
    model: ModelConfig = ModelConfig()
    run: RunConfig = RunConfig()
    output: OutputConfig = OutputConfig()
    params: dict = field(default_factory=dict)

    def canonical_dict(self) -> dict:
        return {
            "task": self.task,
            "model": {
                "dim": self.model.dim,
                "control_power": self.model.control_power,
                "hamiltonian": {
                    "kind": self.model.hamiltonian.kind,
                    "scale": self.model.hamiltonian.scale,
                    "potential": self.model.hamiltonian.potential,
                },
                "couplings": [
                    {"kind": c.kind, "a": c.a, "b": c.b, "scale": c.scale}
                    for c in self.model.couplings
                ],
            },
            "run": {
                "T": self.run.T, "dt": self.run.dt,
                "trajectories": self.run.trajectories,
                "master_seed": self.run.master_seed,
                "parallelism": self.run.parallelism,
            },
            "output": {
                "directory": self.output.directory,
                "formats": list(self.output.formats),
                "downsample": self.output.downsample,
            },
            "params": self.params,
        }

    def config_hash(self) -> str:
        payload = json.dumps(self.canonical_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _require(cond, path_, message):
    if not cond:
        raise ConfigError(path_, message)


def _hamiltonian_from_spec(spec: HamiltonianSpec, m: int) -> TruncatedOperator:
    if spec.kind == "oscillator":
        lam = build_oscillator_ladder(m).eigenvalues
        return TruncatedOperator(m, np.diag(spec.scale * lam).astype(complex),
                                 is_hermitian=True, band_width=0)
    if spec.kind == "zero":
        return TruncatedOperator(m, np.zeros((m, m), dtype=complex), True, 0)
    if spec.kind == "kinetic":
        p_big = build_momentum(m + 2).entries
        kin = spec.scale * (p_big @ p_big)[:m, :m]
        kin = 0.5 * (kin + kin.conj().T)
        return TruncatedOperator(m, kin, True, detect_band_width(kin))
    if spec.kind == "potential":
        name = spec.potential or "zero"
        base = build_hamiltonian(POTENTIALS[name], m)
        entries = spec.scale * base.entries
        return TruncatedOperator(m, entries, True, base.band_width)
    if spec.kind == "potential-only":
        name = spec.potential or "zero"
        entries = spec.scale * potential_matrix(POTENTIALS[name], m)
        return TruncatedOperator(m, entries.astype(complex), True,
                                 detect_band_width(entries))
    raise ConfigError("model.hamiltonian.kind", f"unknown kind {spec.kind!r}")


def _coupling_from_spec(spec: CouplingSpec, m: int) -> TruncatedOperator:
    if spec.kind == "xp":
        return build_coupling(spec.a, spec.b, m)
    if spec.kind == "lowering":
        low = np.zeros((m, m), dtype=complex)
        ks = np.arange(1, m)
        low[ks - 1, ks] = 1.0  # uniform lowering (qubit/qutrit channels)
        return TruncatedOperator(m, spec.scale * low, is_hermitian=False,
                                 band_width=1)
    raise ConfigError("model.couplings.kind", f"unknown kind {spec.kind!r}")


def build_model(cfg: ModelConfig) -> ModelSpec:
    """Materialize the configured operators on the truncation."""
    m = cfg.dim
    return ModelSpec(
        dim=m,
        hamiltonian=_hamiltonian_from_spec(cfg.hamiltonian, m),
        couplings=[_coupling_from_spec(c, m) for c in cfg.couplings],
        control=build_oscillator_ladder(m, power=cfg.control_power),
    )


def _parse_model(raw: dict) -> ModelConfig:
    dim = raw.get("dim", 16)
    _require(isinstance(dim, int) and dim >= 1, "model.dim", "must be a positive integer")
    power = raw.get("control_power", 1)
    _require(isinstance(power, int) and power >= 1, "model.control_power",
             "must be a positive integer")
    ham_raw = raw.get("hamiltonian", {})
    ham = HamiltonianSpec(
        kind=ham_raw.get("kind", "oscillator"),
        scale=float(ham_raw.get("scale", 1.0)),
        potential=ham_raw.get("potential"),
    )
    _require(ham.kind in ("oscillator", "zero", "kinetic", "potential", "potential-only"),
             "model.hamiltonian.kind", f"unknown kind {ham.kind!r}")
    if ham.kind in ("potential", "potential-only") and ham.potential is not None:
        _require(ham.potential in POTENTIALS, "model.hamiltonian.potential",
                 f"unknown potential {ham.potential!r}")
    coups_raw = raw.get("couplings", [{}])
    _require(isinstance(coups_raw, list) and len(coups_raw) >= 1,
             "model.couplings", "need at least one coupling")
    coups = []
    for i, c in enumerate(coups_raw):
        kind = c.get("kind", "xp")
        _require(kind in ("xp", "lowering"), f"model.couplings[{i}].kind",
                 f"unknown kind {kind!r}")
        coups.append(CouplingSpec(kind=kind, a=float(c.get("a", 1.0)),
                                  b=float(c.get("b", 0.0)),
                                  scale=float(c.get("scale", 1.0))))
    return ModelConfig(dim=dim, hamiltonian=ham, couplings=tuple(coups),
                       control_power=power)


def _parse_run(raw: dict) -> RunConfig:
    T = float(raw.get("T", 0.2))
    dt = float(raw.get("dt", 1e-3))
    n = raw.get("trajectories", 100)
    seed = raw.get("master_seed", 0)
    par = raw.get("parallelism", 1)
    _require(T > 0, "run.T", "must be positive")
    _require(dt > 0, "run.dt", "must be positive")
    steps = T / dt
    _require(abs(steps - round(steps)) <= 1e-9 * max(1.0, steps), "run.dt",
             "must divide T")
    _require(isinstance(n, int) and n >= 1, "run.trajectories",
             "must be a positive integer")
    _require(isinstance(seed, int) and seed >= 0, "run.master_seed",
             "must be a nonnegative integer")
    _require(isinstance(par, int) and par >= 1, "run.parallelism",
             "must be a positive integer")
    return RunConfig(T=T, dt=dt, trajectories=n, master_seed=seed, parallelism=par)


def _parse_output(raw: dict) -> OutputConfig:
    directory = raw.get("directory", "out")
    formats = tuple(raw.get("formats", ["csv", "json"]))
    downsample = raw.get("downsample", 1)
    for fmt in formats:
        _require(fmt in ("csv", "json", "jsonl", "binary"), "output.formats",
                 f"unknown format {fmt!r}")
    _require(isinstance(downsample, int) and downsample >= 1,
             "output.downsample", "must be a positive integer")
    return OutputConfig(directory=directory, formats=formats, downsample=downsample)


def parse_config(raw: dict) -> ExperimentConfig:
    task = raw.get("task")
    _require(task in TASKS, "task", f"must be one of {', '.join(TASKS)}")
    params = raw.get("params", {})
    _require(isinstance(params, dict), "params", "must be a table")
    return ExperimentConfig(
        task=task,
        model=_parse_model(raw.get("model", {})),
        run=_parse_run(raw.get("run", {})),
        output=_parse_output(raw.get("output", {})),
        params=params,
    )


def load_config(path) -> ExperimentConfig:
    """Read a TOML (or JSON) experiment file and validate it."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(str(path), "config file not found")
    text = path.read_text()
    if path.suffix == ".json":
        raw = json.loads(text)
    else:
        raw = tomllib.loads(text)
    return parse_config(raw)


def apply_overrides(config: ExperimentConfig, seed=None, out=None, parallel=None,
                    dt=None, T=None, trajectories=None) -> ExperimentConfig:
    """Fold CLI flags into a validated config (re-validating the run block)."""
    run = config.run
    run_raw = {
        "T": T if T is not None else run.T,
        "dt": dt if dt is not None else run.dt,
        "trajectories": trajectories if trajectories is not None else run.trajectories,
        "master_seed": seed if seed is not None else run.master_seed,
        "parallelism": parallel if parallel is not None else run.parallelism,
    }
    output = config.output
    if out is not None:
        output = OutputConfig(directory=str(out), formats=output.formats,
                              downsample=output.downsample)
    return ExperimentConfig(
        task=config.task, model=config.model, run=_parse_run(run_raw),
        output=output, params=config.params,
    )
