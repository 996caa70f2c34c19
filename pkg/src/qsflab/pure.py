"""Pure-state filtering dynamics on a Galerkin truncation.

Two pictures of the same conditional evolution are simulated:

* the linear equation for a non-normalized state chi(t), driven by the
  output process Y(t),

      d chi = -(iH + 1/2 sum_j (L^j)* L^j) chi dt + sum_j L^j chi dY_j,

  whose squared norm is a positive martingale (conservativity);

* the norm-preserving nonlinear equation for phi(t), driven by the
  innovation process B(t), with the coupling recentered by the running
  expectation <L_S>_phi per channel.

The two are linked pathwise: phi = chi/|chi| with dB = dY - 2<L_S> dt, and
conversely chi is recovered from phi by integrating the inverse-norm equation
d(1/|chi|^2) = -(2/|chi|^2) <L_S> dB.  All conversions use left-point
coefficients on the shared grid so the discrete maps invert each other
exactly.  Truncated operators enter in the product form L_m* L_m (the variant
of the scheme that extends to the nonlinear equations).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .errors import BlowUpError, DegenerateStateError, DimensionError
from .operators import ModelSpec, TruncationLadder
from .sde import BrownianPath, ScalarPath, euler_maruyama, stream_generator

INVERSE_NORM_FLOOR = 1e-12


@dataclass
class PureTrajectory:
    """A recorded pure-state trajectory on the driving grid.

    role "linear" states are the non-normalized chi(t) (output picture);
    role "normalized" states are phi(t) with unit norm at every recorded
    time (innovation picture).  norm_sq carries |chi(t)|^2, the Girsanov
    density candidate between the two pictures.
    """

    times: np.ndarray
    states: np.ndarray            # (n_steps + 1, m) complex
    role: str                     # "linear" | "normalized"
    picture: str                  # "output" | "innovation"
    norm_sq: ScalarPath
    model: ModelSpec
    driving: BrownianPath
    renorm_defect: np.ndarray | None = None  # |1 - |phi|| before renormalization

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    def final(self) -> np.ndarray:
        return self.states[-1]

    def check_invariants(self):
        if self.role == "normalized":
            norms = np.linalg.norm(self.states, axis=1)
            if np.max(np.abs(norms - 1.0)) > 1e-12:
                raise DegenerateStateError("normalized trajectory left the unit sphere")
        if np.any(self.norm_sq.values <= 0):
            raise DegenerateStateError("norm_sq must stay positive")


def _drift_matrix(model: ModelSpec) -> np.ndarray:
    """-iH - 1/2 sum_j (L^j)* L^j with the truncated couplings."""
    return -1j * model.hamiltonian.entries - 0.5 * model.quadratic_coupling()


def simulate_linear(model: ModelSpec, chi0: np.ndarray, path: BrownianPath) -> PureTrajectory:
    """Integrate the linear filtering equation along one output path.

    No renormalization is applied; the recorded norm_sq path is the
    conservativity diagnostic.
    """
    chi0 = np.asarray(chi0, dtype=complex)
    if chi0.shape != (model.dim,):
        raise DimensionError("initial state dimension does not match model")
    if np.linalg.norm(chi0) <= 0:
        raise DegenerateStateError("initial state must have positive norm")
    if path.channels != model.channels:
        raise DimensionError("driving channels do not match model couplings")
    A = _drift_matrix(model)
    Ls = [L.entries for L in model.couplings]
    states = euler_maruyama(
        lambda x: A @ x,
        [lambda x, L=L: L @ x for L in Ls],
        chi0, path,
    )
    norm_sq = ScalarPath(times=path.times, values=np.sum(np.abs(states) ** 2, axis=1))
    return PureTrajectory(
        times=path.times, states=states, role="linear", picture="output",
        norm_sq=norm_sq, model=model, driving=path,
    )


def simulate_nonlinear(model: ModelSpec, phi0: np.ndarray, path: BrownianPath) -> PureTrajectory:
    """Integrate the norm-preserving nonlinear equation along one innovation path.

    The state is renormalized after every step; the pre-renormalization norm
    defect (which must be O(dt)) is recorded as a diagnostic.  For Hermitian
    couplings the recentred generator reduces to
    -(iH + (L - <L>)^2 / 2) phi dt + (L - <L>) phi dB.
    """
    phi0 = np.asarray(phi0, dtype=complex)
    if phi0.shape != (model.dim,):
        raise DimensionError("initial state dimension does not match model")
    if abs(np.linalg.norm(phi0) - 1.0) > 1e-12:
        raise DegenerateStateError("nonlinear initial state must be normalized")
    if path.channels != model.channels:
        raise DimensionError("driving channels do not match model couplings")

    H = model.hamiltonian.entries
    Ls = [L.entries for L in model.couplings]
    LS = [model.coupling_symmetric(j) for j in range(model.channels)]
    LA = [model.coupling_antisymmetric(j) for j in range(model.channels)]
    la_zero = [np.max(np.abs(a)) < 1e-14 for a in LA]
    LL = model.quadratic_coupling()
    defects = []

    def expectations(phi):
        nrm2 = float(np.real(np.vdot(phi, phi)))
        return [float(np.real(np.vdot(phi, S @ phi))) / nrm2 for S in LS]

    def drift(phi):
        cs = expectations(phi)
        out = -1j * (H @ phi) - 0.5 * (LL @ phi)
        for j, c in enumerate(cs):
            if not la_zero[j]:
                out += 1j * c * (LA[j] @ phi)
            # -(1/2)[(L-c)*(L-c) - L*L] phi = c L_S phi - c^2/2 phi
            out += c * (LS[j] @ phi) - 0.5 * c * c * phi
        return out

    def diffusion(phi, j):
        c = expectations(phi)[j]
        return Ls[j] @ phi - c * phi

    def renormalize(phi):
        nrm = np.linalg.norm(phi)
        if nrm <= 1e-300:
            raise DegenerateStateError("state vanished before renormalization")
        defects.append(abs(nrm - 1.0))
        return phi / nrm

    states = euler_maruyama(
        drift, [lambda x, j=j: diffusion(x, j) for j in range(model.channels)],
        phi0, path, post_step=renormalize,
    )
    norm_sq = ScalarPath(times=path.times, values=np.ones(path.n_steps + 1))
    return PureTrajectory(
        times=path.times, states=states, role="normalized", picture="innovation",
        norm_sq=norm_sq, model=model, driving=path,
        renorm_defect=np.asarray(defects),
    )


def _symmetric_expectations(model: ModelSpec, states: np.ndarray) -> np.ndarray:
    """2 <L_S^j>_phi per time and channel for unit-normalized states.

    Returns shape (n_channels, n_times).
    """
    out = np.empty((model.channels, states.shape[0]))
    for j in range(model.channels):
        S = model.coupling_symmetric(j)
        out[j] = 2.0 * np.real(np.einsum("ti,ij,tj->t", states.conj(), S, states))
    return out


def normalize_trajectory(traj: PureTrajectory) -> tuple[PureTrajectory, np.ndarray]:
    """Normalize a linear trajectory and convert its noise to the innovation picture.

    Returns (phi trajectory, innovation increments dB = dY - 2<L_S> dt with
    left-point coefficients).  The linear norm_sq is carried over on the
    normalized trajectory as the measure-change density candidate.
    """
    if traj.role != "linear":
        raise ValueError("normalize_trajectory expects a linear-role trajectory")
    norms = np.linalg.norm(traj.states, axis=1)
    if np.min(norms) <= 0:
        raise DegenerateStateError("vanishing norm along the linear trajectory")
    phi = traj.states / norms[:, None]
    drift_term = _symmetric_expectations(traj.model, phi)  # 2 <L_S>
    dt = traj.driving.dt
    innovation = traj.driving.increments - drift_term[:, :-1] * dt
    normalized = PureTrajectory(
        times=traj.times, states=phi, role="normalized", picture="innovation",
        norm_sq=traj.norm_sq, model=traj.model,
        driving=replace(traj.driving, increments=innovation),
    )
    return normalized, innovation


def lift_to_linear(traj: PureTrajectory) -> tuple[PureTrajectory, np.ndarray]:
    """Rebuild the linear trajectory chi = phi |chi| from a normalized one.

    Integrates the inverse-norm equation d u = -2 u <L_S> dB with u(0) = 1
    (u = 1/|chi|^2) on the same grid and converts the noise back to the
    output picture, dY = dB + 2 <L_S> dt.  If u hits the 1e-12 floor it is
    clipped there and the event reported via a warning.
    """
    if traj.role != "normalized":
        raise ValueError("lift_to_linear expects a normalized-role trajectory")
    drift_term = _symmetric_expectations(traj.model, traj.states)  # 2 <L_S>
    dB = traj.driving.increments
    dt = traj.driving.dt
    n = traj.driving.n_steps
    u = np.empty(n + 1)
    u[0] = 1.0
    clipped = 0
    for k in range(n):
        u[k + 1] = u[k] - u[k] * float(drift_term[:, k] @ dB[:, k])
        if u[k + 1] <= INVERSE_NORM_FLOOR:
            u[k + 1] = INVERSE_NORM_FLOOR
            clipped += 1
    if clipped:
        warnings.warn(f"inverse norm clipped at floor on {clipped} steps")
    chi_norm = 1.0 / np.sqrt(u)
    chi = traj.states * chi_norm[:, None]
    output = dB + drift_term[:, :-1] * dt
    linear = PureTrajectory(
        times=traj.times, states=chi, role="linear", picture="output",
        norm_sq=ScalarPath(times=traj.times, values=1.0 / u),
        model=traj.model,
        driving=replace(traj.driving, increments=output),
    )
    return linear, output


def roundtrip_error(model: ModelSpec, phi0: np.ndarray, path: BrownianPath) -> float:
    """Max-over-time defect of the nonlinear -> linear -> nonlinear round trip.

    Simulates the nonlinear equation along B, lifts it to a linear pair
    (chi, Y), re-simulates the linear equation along that Y, normalizes, and
    compares against the original phi(t).  Exact in continuous time; the
    discrete defect decays with strong order ~1/2.
    """
    nonlinear = simulate_nonlinear(model, phi0, path)
    _, output = lift_to_linear(nonlinear)
    linear = simulate_linear(model, phi0, replace(path, increments=output))
    recovered, _ = normalize_trajectory(linear)
    return float(np.max(np.linalg.norm(recovered.states - nonlinear.states, axis=1)))


# ---------------------------------------------------------------------------
# Batched ensembles
# ---------------------------------------------------------------------------

def _batch_increments(channels, n_steps, dt, master_seed, indices):
    inc = np.empty((len(indices), channels, n_steps))
    for row, idx in enumerate(indices):
        rng = stream_generator(master_seed, int(idx))
        inc[row] = rng.normal(0.0, np.sqrt(dt), size=(channels, n_steps))
    return inc


def _linear_states_batch(model, chi0, increments, dt):
    """Vectorized linear stepping for a batch of trajectories.

    increments has shape (batch, channels, n_steps); returns states of shape
    (batch, n_steps + 1, m).
    """
    A_T = _drift_matrix(model).T
    L_Ts = [L.entries.T for L in model.couplings]
    batch, _, n = increments.shape
    X = np.broadcast_to(np.asarray(chi0, dtype=complex), (batch, model.dim)).copy()
    out = np.empty((batch, n + 1, model.dim), dtype=complex)
    out[:, 0] = X
    for k in range(n):
        step = (X @ A_T) * dt
        for j, L_T in enumerate(L_Ts):
            step += (X @ L_T) * increments[:, j, k][:, None]
        X = X + step
        if not np.all(np.isfinite(X.view(float))):
            raise BlowUpError(k + 1, f"ensemble blow-up at step {k + 1}")
        out[:, k + 1] = X
    return out


def _nonlinear_states_batch(model, phi0, increments, dt):
    """Vectorized norm-preserving stepping with per-step renormalization."""
    H = model.hamiltonian.entries
    LL = model.quadratic_coupling()
    A_T = (-1j * H - 0.5 * LL).T
    L_Ts = [L.entries.T for L in model.couplings]
    LS_Ts = [model.coupling_symmetric(j).T for j in range(model.channels)]
    LA_Ts = [model.coupling_antisymmetric(j).T for j in range(model.channels)]
    la_zero = [np.max(np.abs(a)) < 1e-14 for a in LA_Ts]
    batch, _, n = increments.shape
    X = np.broadcast_to(np.asarray(phi0, dtype=complex), (batch, model.dim)).copy()
    out = np.empty((batch, n + 1, model.dim), dtype=complex)
    out[:, 0] = X
    max_defect = 0.0
    for k in range(n):
        step = (X @ A_T) * dt
        nrm2 = np.real(np.einsum("bi,bi->b", X.conj(), X))
        for j in range(model.channels):
            XS = X @ LS_Ts[j]
            c = np.real(np.einsum("bi,bi->b", X.conj(), XS)) / nrm2
            step += (c[:, None] * XS - 0.5 * (c * c)[:, None] * X) * dt
            if not la_zero[j]:
                step += 1j * c[:, None] * (X @ LA_Ts[j]) * dt
            step += (X @ L_Ts[j] - c[:, None] * X) * increments[:, j, k][:, None]
        X = X + step
        norms = np.linalg.norm(X, axis=1)
        if np.min(norms) <= 1e-300:
            raise DegenerateStateError(f"ensemble state vanished at step {k + 1}")
        max_defect = max(max_defect, float(np.max(np.abs(norms - 1.0))))
        X = X / norms[:, None]
        if not np.all(np.isfinite(X.view(float))):
            raise BlowUpError(k + 1, f"ensemble blow-up at step {k + 1}")
        out[:, k + 1] = X
    return out, max_defect


def iter_trajectories(model, x0, T, dt, n_traj, master_seed, kind="linear",
                      batch_size=128, start_index=0):
    """Yield trajectories one by one, computed in fixed-size vectorized batches.

    Batch boundaries depend only on (n_traj, batch_size), never on worker
    count, so aggregation order is reproducible under any parallelism.
    """
    from .sde import n_grid_steps

    n = n_grid_steps(T, dt)
    indices = np.arange(start_index, start_index + n_traj)
    for lo in range(0, n_traj, batch_size):
        chunk = indices[lo: lo + batch_size]
        inc = _batch_increments(model.channels, n, dt, master_seed, chunk)
        if kind == "linear":
            states = _linear_states_batch(model, x0, inc, dt)
        elif kind == "nonlinear":
            states, _ = _nonlinear_states_batch(model, x0, inc, dt)
        else:
            raise ValueError(f"unknown ensemble kind {kind!r}")
        times = dt * np.arange(n + 1)
        for row, idx in enumerate(chunk):
            path = BrownianPath(
                channels=model.channels, horizon=T, dt=dt, increments=inc[row],
                master_seed=master_seed, trajectory_index=int(idx),
            )
            nsq = np.sum(np.abs(states[row]) ** 2, axis=1)
            yield PureTrajectory(
                times=times, states=states[row],
                role="linear" if kind == "linear" else "normalized",
                picture="output" if kind == "linear" else "innovation",
                norm_sq=ScalarPath(times=times, values=nsq),
                model=model, driving=path,
            )


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

class _RunningMoments:
    """Streaming per-time mean and standard error."""

    def __init__(self, length):
        self.n = 0
        self.total = np.zeros(length)
        self.total_sq = np.zeros(length)

    def add(self, values):
        self.n += 1
        self.total += values
        self.total_sq += values ** 2

    def mean(self):
        return self.total / self.n

    def se(self):
        if self.n < 2:
            return np.full_like(self.total, np.inf)
        var = (self.total_sq - self.total**2 / self.n) / (self.n - 1)
        return np.sqrt(np.maximum(var, 0.0) / self.n)


def martingale_report(trajectories, ladder: TruncationLadder | None = None,
                      alpha: float | None = None, beta: float = 0.0,
                      z: float = 4.0, allowance: float = 0.0) -> dict:
    """Conservativity diagnostics for an ensemble of linear trajectories.

    Checks |E |chi(t)|^2 - |chi0|^2| <= z * SE + allowance at every recorded
    time.  When a ladder is supplied, also tracks E |C chi(t)|^2 and, when a
    dissipativity rate alpha is given, compares it against the growth bound
    exp(alpha t) (|C chi0|^2 + alpha t (|chi0|^2 + beta)).
    """
    norm_stats = None
    c_stats = None
    times = None
    target = None
    c_start = None
    count = 0
    for traj in trajectories:
        if traj.role != "linear":
            raise ValueError("martingale diagnostics need linear-role trajectories")
        if norm_stats is None:
            times = traj.times
            target = traj.norm_sq.values[0]
            norm_stats = _RunningMoments(len(times))
            if ladder is not None:
                c_stats = _RunningMoments(len(times))
                lam2 = ladder.eigenvalues ** 2
                c_start = float(np.sum(lam2 * np.abs(traj.states[0]) ** 2))
        norm_stats.add(traj.norm_sq.values)
        if c_stats is not None:
            lam2 = ladder.eigenvalues ** 2
            c_stats.add(np.sum(lam2 * np.abs(traj.states) ** 2, axis=1))
        count += 1
    if count < 2:
        raise ValueError("martingale diagnostics need at least two trajectories")

    mean = norm_stats.mean()
    se = norm_stats.se()
    deviation = np.abs(mean - target)
    violated = deviation > z * se + allowance
    report = {
        "times": times,
        "mean": mean,
        "se": se,
        "target": target,
        "violated": violated,
        "any_violation": bool(np.any(violated)),
        "trajectories": count,
    }
    if c_stats is not None:
        report["c_mean"] = c_stats.mean()
        report["c_se"] = c_stats.se()
        if alpha is not None:
            # positive rates only: the Gronwall bound needs alpha > 0
            rate = max(alpha, 1e-12)
            bound = np.exp(rate * times) * (c_start + rate * times * (target + beta))
            report["bound"] = bound
            report["bound_violated"] = (report["c_mean"] - z * report["c_se"]) > bound
            report["any_bound_violation"] = bool(np.any(report["bound_violated"]))
    return report


def discretization_allowance(model, chi0, T, dt, n_traj, master_seed) -> float:
    """Estimate the O(dt) martingale bias allowance c*dt by dt-halving.

    Runs the same ensemble at dt and dt/2 (bridge-refined noise) and returns
    twice the largest mean shift, an estimate of the full-step bias.
    """
    from .sde import n_grid_steps, refine, sample_path

    n = n_grid_steps(T, dt)
    stats_coarse = _RunningMoments(n + 1)
    stats_fine = _RunningMoments(n + 1)
    for idx in range(n_traj):
        path = sample_path(model.channels, T, dt, master_seed, idx)
        coarse = simulate_linear(model, chi0, path)
        fine = simulate_linear(model, chi0, refine(path, 2))
        stats_coarse.add(coarse.norm_sq.values)
        stats_fine.add(fine.norm_sq.values[::2])
    return 2.0 * float(np.max(np.abs(stats_coarse.mean() - stats_fine.mean())))


def galerkin_convergence(models, chi0, paths) -> dict:
    """Truncation-error table against the largest dimension on shared noise.

    models must be ordered by strictly increasing dimension and share the
    channel count; chi0 lives at the smallest dimension and is zero-padded
    upward.  Returns mean squared endpoint errors E |chi_K(T) - chi_k(T)|^2
    for each k < K and the fitted log-log slope against the top reference
    eigenvalue lambda_{m_k}.
    """
    dims = [m.dim for m in models]
    if any(d2 <= d1 for d1, d2 in zip(dims, dims[1:])):
        raise DimensionError("model dimensions must be strictly increasing")
    chi0 = np.asarray(chi0, dtype=complex)
    if chi0.shape != (dims[0],):
        raise DimensionError("chi0 must live at the smallest dimension")
    if isinstance(paths, BrownianPath):
        paths = [paths]
    big = dims[-1]
    sq_errors = np.zeros(len(dims) - 1)
    for path in paths:
        finals = []
        for model in models:
            x0 = np.zeros(model.dim, dtype=complex)
            x0[: dims[0]] = chi0
            traj = simulate_linear(model, x0, path)
            padded = np.zeros(big, dtype=complex)
            padded[: model.dim] = traj.final()
            finals.append(padded)
        for k in range(len(dims) - 1):
            sq_errors[k] += np.sum(np.abs(finals[-1] - finals[k]) ** 2)
    sq_errors /= len(paths)
    lambdas = np.array([m.control.eigenvalues[-1] for m in models[:-1]])
    safe = np.maximum(sq_errors, 1e-300)
    slope = float(np.polyfit(np.log(lambdas), np.log(safe), 1)[0])
    return {
        "dims": dims[:-1],
        "reference_dim": big,
        "lambdas": lambdas,
        "errors": sq_errors,
        "slope": slope,
        "strictly_decreasing": bool(np.all(np.diff(sq_errors) < 0)),
    }
