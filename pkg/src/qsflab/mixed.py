"""Mixed-state filtering in the Hilbert-Schmidt space of Hermitian matrices.

The linear stochastic master equation evolves a non-normalized gamma(t),

    d gamma = -i[H, gamma] dt + (L gamma L* - 1/2 {L*L, gamma}) dt
              + (L gamma + gamma L*) dY        (per channel),

whose trace is a positive martingale.  Its normalization rho = gamma/tr gamma
satisfies the nonlinear master equation driven by the innovation process, and
taking expectations of the linear flow gives the deterministic Lindblad
equation.  A mixed initial state can also be unraveled: the spectral
decomposition rho0 = sum_k p_k e_k (x) e_k* evolves as a weighted family of
pure vectors driven by common noise plus a shared feedback drift pi(t), and
the weighted outer-product sum reconstructs the same normalized solution.

Hermiticity is re-imposed after every step.  Positivity of the linear flow is
diagnosed (smallest eigenvalue reported), never enforced: clipping would
silently bias the trace martingale.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    BlowUpError,
    DegenerateStateError,
    DimensionError,
    NotAStateError,
)
from .operators import ModelSpec, TruncationLadder
from .sde import BrownianPath, ScalarPath, n_grid_steps, stream_generator

INVERSE_TRACE_FLOOR = 1e-12
HERMITICITY_RTOL = 1e-12


def hermitize(mat: np.ndarray) -> np.ndarray:
    return 0.5 * (mat + mat.conj().swapaxes(-1, -2))


@dataclass(frozen=True)
class DensityOperator:
    """Hermitian matrix state with on-demand positivity diagnostics."""

    dim: int
    entries: np.ndarray

    def __post_init__(self):
        ent = np.asarray(self.entries, dtype=complex)
        if ent.shape != (self.dim, self.dim):
            raise DimensionError("density matrix shape does not match dim")
        scale = max(float(np.max(np.abs(ent))), 1e-300)
        if float(np.max(np.abs(ent - ent.conj().T))) > HERMITICITY_RTOL * scale:
            raise NotAStateError("density matrix is not Hermitian")
        object.__setattr__(self, "entries", ent)

    @property
    def trace(self) -> float:
        return float(np.real(np.trace(self.entries)))

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(hermitize(self.entries))[0])


@dataclass
class DensityTrajectory:
    """Recorded density-matrix trajectory.

    matrices holds the state at the recorded times (every record_stride-th
    grid point); trace_path is always kept on the full driving grid.  Role
    "linear" is the non-normalized gamma (output picture); "normalized" is
    rho with unit trace at every step (innovation picture).
    """

    times: np.ndarray
    matrices: np.ndarray          # (n_recorded, m, m) complex Hermitian
    role: str                     # "linear" | "normalized"
    picture: str | None           # "output" | "innovation" | None (deterministic)
    trace_path: ScalarPath
    model: ModelSpec
    driving: BrownianPath | None
    record_stride: int = 1
    hermitization_defect: float = 0.0

    @property
    def dim(self) -> int:
        return self.matrices.shape[1]

    def final(self) -> np.ndarray:
        return self.matrices[-1]

    def state_at(self, k: int) -> DensityOperator:
        return DensityOperator(dim=self.dim, entries=self.matrices[k])

    def min_eigenvalues(self) -> np.ndarray:
        """Smallest eigenvalue at each recorded time (positivity diagnostic)."""
        return np.linalg.eigvalsh(self.matrices)[:, 0]

    def check_invariants(self):
        if self.role == "normalized":
            traces = np.real(np.trace(self.matrices, axis1=1, axis2=2))
            if np.max(np.abs(traces - 1.0)) > 1e-10:
                raise DegenerateStateError("normalized trajectory lost unit trace")
        elif np.any(self.trace_path.values <= 0):
            raise DegenerateStateError("linear trajectory trace must stay positive")


@dataclass(frozen=True)
class WeightedEnsemble:
    """Initial data of a pure-state unraveling: weights and member vectors."""

    weights: np.ndarray           # (K,) nonnegative, summing to 1
    members: np.ndarray           # (K, m) complex
    clipped: bool = False         # negative eigenvalues were clipped to zero

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        members = np.asarray(self.members, dtype=complex)
        if w.ndim != 1 or members.shape[:1] != w.shape:
            raise DimensionError("weights and members disagree in length")
        if np.any(w < 0):
            raise NotAStateError("ensemble weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise NotAStateError("ensemble weights must sum to one")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "members", members)

    def reconstruct(self) -> np.ndarray:
        """gamma = sum_k p_k e_k (x) e_k*; Hermitian PSD by construction."""
        return (self.members.T * self.weights) @ self.members.conj()


@dataclass
class UnravelingTrajectory:
    """Joint trajectory of the weighted members with their shared feedback."""

    times: np.ndarray
    weights: np.ndarray
    members: np.ndarray           # (n_recorded, K, m)
    feedback: np.ndarray          # (channels, n_steps) pi(t) at left points
    reconstructed: DensityTrajectory = field(repr=False)

    def ensemble_at(self, k: int) -> WeightedEnsemble:
        return WeightedEnsemble(weights=self.weights, members=self.members[k])


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------

def _lindblad_generator(model: ModelSpec):
    H = model.hamiltonian.entries
    Ls = [L.entries for L in model.couplings]
    Lds = [L.conj().T for L in Ls]
    LL = model.quadratic_coupling()

    def generator(gamma):
        out = -1j * (H @ gamma - gamma @ H)
        out -= 0.5 * (LL @ gamma + gamma @ LL)
        for L, Ld in zip(Ls, Lds):
            out += L @ gamma @ Ld
        return out

    return generator


def _validate_initial(model: ModelSpec, gamma0: np.ndarray) -> np.ndarray:
    gamma0 = np.asarray(gamma0, dtype=complex)
    if gamma0.shape != (model.dim, model.dim):
        raise DimensionError("initial matrix dimension does not match model")
    scale = max(float(np.max(np.abs(gamma0))), 1e-300)
    if float(np.max(np.abs(gamma0 - gamma0.conj().T))) > HERMITICITY_RTOL * scale:
        raise NotAStateError("initial matrix must be Hermitian")
    return gamma0


def simulate_linear_master(model: ModelSpec, gamma0: np.ndarray,
                           path: BrownianPath, record_stride: int = 1) -> DensityTrajectory:
    """Integrate the linear stochastic master equation along one output path.

    The state is re-hermitized after every step; the trace is recorded on the
    full grid and never renormalized.
    """
    gamma0 = _validate_initial(model, gamma0)
    if float(np.real(np.trace(gamma0))) <= 0:
        raise NotAStateError("initial trace must be positive")
    if path.channels != model.channels:
        raise DimensionError("driving channels do not match model couplings")
    states, traces, defect = _linear_master_batch(
        model, gamma0[None], path.increments[None], path.dt, record_stride,
    )
    recorded = path.times[::record_stride]
    return DensityTrajectory(
        times=recorded, matrices=states[0], role="linear", picture="output",
        trace_path=ScalarPath(times=path.times, values=traces[0]),
        model=model, driving=path, record_stride=record_stride,
        hermitization_defect=defect,
    )


def simulate_nonlinear_master(model: ModelSpec, rho0: np.ndarray,
                              path: BrownianPath, record_stride: int = 1) -> DensityTrajectory:
    """Integrate the normalized (nonlinear) master equation along one innovation path.

    Per-step hermitization and trace renormalization are applied; the
    pre-renormalization trace is checked against collapse.
    """
    rho0 = _validate_initial(model, rho0)
    if abs(np.real(np.trace(rho0)) - 1.0) > 1e-10:
        raise NotAStateError("normalized initial state needs unit trace")
    if DensityOperator(model.dim, rho0).min_eigenvalue() < -1e-10:
        raise NotAStateError("normalized initial state must be PSD")
    if path.channels != model.channels:
        raise DimensionError("driving channels do not match model couplings")
    generator = _lindblad_generator(model)
    Ls = [L.entries for L in model.couplings]
    Lds = [L.conj().T for L in Ls]
    n = path.n_steps
    n_rec = (n // record_stride) + 1
    out = np.empty((n_rec, model.dim, model.dim), dtype=complex)
    rho = rho0.copy()
    out[0] = rho
    traces = np.ones(n + 1)
    for k in range(n):
        step = generator(rho) * path.dt
        for j, (L, Ld) in enumerate(zip(Ls, Lds)):
            flow = L @ rho + rho @ Ld
            flow -= rho * np.real(np.trace(flow))
            step += flow * path.increments[j, k]
        rho = hermitize(rho + step)
        tr = float(np.real(np.trace(rho)))
        if not np.isfinite(tr):
            raise BlowUpError(k + 1)
        if tr <= 1e-12:
            raise DegenerateStateError(f"trace collapsed at step {k + 1}")
        rho = rho / tr
        if (k + 1) % record_stride == 0:
            out[(k + 1) // record_stride] = rho
    return DensityTrajectory(
        times=path.times[::record_stride], matrices=out, role="normalized",
        picture="innovation",
        trace_path=ScalarPath(times=path.times, values=traces),
        model=model, driving=path, record_stride=record_stride,
    )


def _channel_trace_rates(model: ModelSpec, matrices: np.ndarray) -> np.ndarray:
    """tr(L^j rho + rho (L^j)*) per channel and time; shape (n_ch, n_times)."""
    out = np.empty((model.channels, matrices.shape[0]))
    for j, L in enumerate(model.couplings):
        # tr(L rho) + tr(rho L*) = 2 Re tr(L rho)
        out[j] = 2.0 * np.real(np.einsum("ij,tji->t", L.entries, matrices))
    return out


def normalize_master(traj: DensityTrajectory) -> tuple[DensityTrajectory, np.ndarray]:
    """Normalize a linear trajectory and convert to the innovation picture.

    rho = gamma / tr gamma; dB = dY - tr(L rho + rho L*) dt at left points.
    The linear trace path is carried over as the measure-change density
    candidate.  Requires full-grid recording.
    """
    if traj.role != "linear":
        raise ValueError("normalize_master expects a linear-role trajectory")
    if traj.record_stride != 1:
        raise ValueError("picture conversion needs record_stride=1")
    traces = traj.trace_path.values
    if np.min(traces) <= 0:
        raise DegenerateStateError("nonpositive trace along the linear trajectory")
    rho = traj.matrices / traces[:, None, None]
    rates = _channel_trace_rates(traj.model, rho)
    innovation = traj.driving.increments - rates[:, :-1] * traj.driving.dt
    normalized = DensityTrajectory(
        times=traj.times, matrices=rho, role="normalized", picture="innovation",
        trace_path=traj.trace_path, model=traj.model,
        driving=replace(traj.driving, increments=innovation),
    )
    return normalized, innovation


def lift_master(traj: DensityTrajectory) -> tuple[DensityTrajectory, np.ndarray]:
    """Rebuild the linear trajectory from a normalized one.

    Integrates the inverse-trace equation d u = -u tr(L rho + rho L*) dB
    with u(0) = 1, sets gamma = rho / u and dY = dB + tr(L rho + rho L*) dt.
    The inverse trace is clipped at the 1e-12 floor if it degenerates, with a
    warning.
    """
    if traj.role != "normalized":
        raise ValueError("lift_master expects a normalized-role trajectory")
    if traj.record_stride != 1:
        raise ValueError("picture conversion needs record_stride=1")
    rates = _channel_trace_rates(traj.model, traj.matrices)
    dB = traj.driving.increments
    n = traj.driving.n_steps
    u = np.empty(n + 1)
    u[0] = 1.0
    clipped = 0
    for k in range(n):
        u[k + 1] = u[k] - u[k] * float(rates[:, k] @ dB[:, k])
        if u[k + 1] <= INVERSE_TRACE_FLOOR:
            u[k + 1] = INVERSE_TRACE_FLOOR
            clipped += 1
    if clipped:
        warnings.warn(f"inverse trace clipped at floor on {clipped} steps")
    gamma = traj.matrices / u[:, None, None]
    output = dB + rates[:, :-1] * traj.driving.dt
    linear = DensityTrajectory(
        times=traj.times, matrices=gamma, role="linear", picture="output",
        trace_path=ScalarPath(times=traj.times, values=1.0 / u),
        model=traj.model, driving=replace(traj.driving, increments=output),
    )
    return linear, output


def solve_lindblad(model: ModelSpec, gamma0: np.ndarray, T: float, dt: float) -> DensityTrajectory:
    """Classical RK4 integration of the deterministic Lindblad equation."""
    gamma0 = _validate_initial(model, gamma0)
    generator = _lindblad_generator(model)
    n = n_grid_steps(T, dt)
    out = np.empty((n + 1, model.dim, model.dim), dtype=complex)
    gamma = gamma0.copy()
    out[0] = gamma
    for k in range(n):
        k1 = generator(gamma)
        k2 = generator(gamma + 0.5 * dt * k1)
        k3 = generator(gamma + 0.5 * dt * k2)
        k4 = generator(gamma + dt * k3)
        gamma = hermitize(gamma + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4))
        if not np.all(np.isfinite(gamma.view(float))):
            raise BlowUpError(k + 1)
        out[k + 1] = gamma
    times = dt * np.arange(n + 1)
    traces = np.real(np.trace(out, axis1=1, axis2=2))
    return DensityTrajectory(
        times=times, matrices=out, role="linear", picture=None,
        trace_path=ScalarPath(times=times, values=traces),
        model=model, driving=None,
    )


def spectral_decompose(rho0: np.ndarray, clip_tol: float = 1e-10,
                       weight_cutoff: float = 1e-14) -> WeightedEnsemble:
    """Eigen-decomposition of a state into a weighted pure-state ensemble.

    Eigenvalues below -clip_tol are rejected; small negatives inside the
    tolerance are clipped to zero and the weights renormalized (reported via
    the ``clipped`` flag).  Weights below weight_cutoff are dropped, ordered
    descending.
    """
    rho0 = np.asarray(rho0, dtype=complex)
    scale = max(float(np.max(np.abs(rho0))), 1e-300)
    if float(np.max(np.abs(rho0 - rho0.conj().T))) > HERMITICITY_RTOL * scale:
        raise NotAStateError("state must be Hermitian")
    w, U = np.linalg.eigh(hermitize(rho0))
    if w[0] < -clip_tol:
        raise NotAStateError(f"significantly negative eigenvalue {w[0]:.3e}")
    clipped = bool(np.any(w < 0))
    w = np.maximum(w, 0.0)
    w = w / w.sum()
    order = np.argsort(w)[::-1]
    w = w[order]
    vectors = U[:, order].T
    keep = w >= weight_cutoff
    w = w[keep] / w[keep].sum()
    return WeightedEnsemble(weights=w, members=vectors[keep], clipped=clipped)


def simulate_vectorized_unraveling(model: ModelSpec, ensemble0: WeightedEnsemble,
                                   path: BrownianPath, record_stride: int = 1,
                                   ) -> UnravelingTrajectory:
    """Joint pure-state unraveling of the nonlinear master equation.

    All members follow de_k = (-iH - L*L/2) e_k dt + L e_k [dB + pi dt] with
    the shared feedback pi(t) = sum_k p_k (e_k, (L + L*) e_k) / sum_k p_k
    |e_k|^2 evaluated once per step at the left point: that common value is
    the coupling that makes the weighted family reproduce the mixed-state
    flow.  Returns the member trajectory and the reconstructed normalized
    density trajectory.
    """
    if path.channels != model.channels:
        raise DimensionError("driving channels do not match model couplings")
    p = ensemble0.weights
    E = np.array(ensemble0.members, dtype=complex)
    if E.shape[1] != model.dim:
        raise DimensionError("ensemble members do not match model dimension")
    A_T = (-1j * model.hamiltonian.entries - 0.5 * model.quadratic_coupling()).T
    L_Ts = [L.entries.T for L in model.couplings]
    LpLd_Ts = [(L.entries + L.entries.conj().T).T for L in model.couplings]
    n = path.n_steps
    dt = path.dt
    n_rec = (n // record_stride) + 1
    members = np.empty((n_rec, len(p), model.dim), dtype=complex)
    members[0] = E
    feedback = np.empty((model.channels, n))
    rhos = np.empty((n_rec, model.dim, model.dim), dtype=complex)
    traces = np.empty(n + 1)

    def reconstruct(E):
        return (E.T * p) @ E.conj()

    gamma = reconstruct(E)
    traces[0] = np.real(np.trace(gamma))
    rhos[0] = gamma / traces[0]
    for k in range(n):
        denom = float(p @ np.real(np.einsum("ki,ki->k", E.conj(), E)))
        if denom <= 1e-12:
            raise DegenerateStateError(f"unraveling weight norm collapsed at step {k + 1}")
        step = (E @ A_T) * dt
        for j in range(model.channels):
            pi = float(p @ np.real(np.einsum("ki,ki->k", E.conj(), E @ LpLd_Ts[j]))) / denom
            feedback[j, k] = pi
            step += (E @ L_Ts[j]) * (path.increments[j, k] + pi * dt)
        E = E + step
        if not np.all(np.isfinite(E.view(float))):
            raise BlowUpError(k + 1)
        gamma = reconstruct(E)
        traces[k + 1] = np.real(np.trace(gamma))
        if (k + 1) % record_stride == 0:
            members[(k + 1) // record_stride] = E
            rhos[(k + 1) // record_stride] = gamma / traces[k + 1]
    reconstructed = DensityTrajectory(
        times=path.times[::record_stride], matrices=rhos, role="normalized",
        picture="innovation",
        trace_path=ScalarPath(times=path.times, values=traces),
        model=model, driving=path, record_stride=record_stride,
    )
    return UnravelingTrajectory(
        times=path.times[::record_stride], weights=p, members=members,
        feedback=feedback, reconstructed=reconstructed,
    )


def c_trace_norm(gamma: np.ndarray, ladder: TruncationLadder) -> float:
    """Reference-weighted trace norm tr(C |gamma| C), C diagonal in this basis.

    For positive gamma this equals the Hilbert-Schmidt norm squared of
    C sqrt(gamma).
    """
    gamma = np.asarray(gamma, dtype=complex)
    if gamma.shape != (ladder.dim, ladder.dim):
        raise DimensionError("matrix dimension does not match ladder")
    w, U = np.linalg.eigh(hermitize(gamma))
    abs_diag = (np.abs(U) ** 2) @ np.abs(w)   # diagonal of |gamma|
    return float(np.sum(ladder.eigenvalues**2 * abs_diag))


# ---------------------------------------------------------------------------
# Batched ensembles and diagnostics
# ---------------------------------------------------------------------------

def _linear_master_batch(model, gamma0, increments, dt, record_stride=1):
    """Vectorized linear-master stepping for a batch of driving paths.

    increments: (batch, channels, n_steps).  Returns (recorded states of
    shape (batch, n_rec, m, m), full-grid traces (batch, n_steps + 1), and
    the largest hermitization defect seen).
    """
    H = model.hamiltonian.entries
    Ls = [L.entries for L in model.couplings]
    Lds = [L.conj().T for L in Ls]
    LL = model.quadratic_coupling()
    A = -1j * H - 0.5 * LL  # drift = A gamma + gamma A* + sum L gamma L*
    batch, _, n = increments.shape
    n_rec = (n // record_stride) + 1
    G = np.broadcast_to(gamma0, (batch,) + gamma0.shape[-2:]).copy()
    out = np.empty((batch, n_rec, model.dim, model.dim), dtype=complex)
    traces = np.empty((batch, n + 1))
    out[:, 0] = G
    traces[:, 0] = np.real(np.trace(G, axis1=1, axis2=2))
    max_defect = 0.0
    for k in range(n):
        AG = A @ G
        step = (AG + AG.conj().swapaxes(1, 2)) * dt
        for j, (L, Ld) in enumerate(zip(Ls, Lds)):
            LG = L @ G
            step += (LG @ Ld) * dt
            step += (LG + LG.conj().swapaxes(1, 2)) * increments[:, j, k][:, None, None]
        G = G + step
        herm = hermitize(G)
        max_defect = max(max_defect, float(np.max(np.abs(G - herm))))
        G = herm
        tr = np.real(np.trace(G, axis1=1, axis2=2))
        if not np.all(np.isfinite(tr)):
            raise BlowUpError(k + 1, f"ensemble blow-up at step {k + 1}")
        traces[:, k + 1] = tr
        if (k + 1) % record_stride == 0:
            out[:, (k + 1) // record_stride] = G
    return out, traces, max_defect


def _batch_increments(channels, n_steps, dt, master_seed, indices):
    inc = np.empty((len(indices), channels, n_steps))
    for row, idx in enumerate(indices):
        rng = stream_generator(master_seed, int(idx))
        inc[row] = rng.normal(0.0, np.sqrt(dt), size=(channels, n_steps))
    return inc


def iter_linear_master(model, gamma0, T, dt, n_traj, master_seed,
                       record_stride=1, batch_size=64, start_index=0):
    """Yield linear-master trajectories, computed in fixed-size batches."""
    n = n_grid_steps(T, dt)
    gamma0 = _validate_initial(model, gamma0)
    indices = np.arange(start_index, start_index + n_traj)
    full_times = dt * np.arange(n + 1)
    recorded = full_times[::record_stride]
    for lo in range(0, n_traj, batch_size):
        chunk = indices[lo: lo + batch_size]
        inc = _batch_increments(model.channels, n, dt, master_seed, chunk)
        states, traces, defect = _linear_master_batch(model, gamma0, inc, dt, record_stride)
        for row, idx in enumerate(chunk):
            driving = BrownianPath(
                channels=model.channels, horizon=T, dt=dt, increments=inc[row],
                master_seed=master_seed, trajectory_index=int(idx),
            )
            yield DensityTrajectory(
                times=recorded, matrices=states[row], role="linear",
                picture="output",
                trace_path=ScalarPath(times=full_times, values=traces[row]),
                model=model, driving=driving, record_stride=record_stride,
                hermitization_defect=defect,
            )


class _Accumulator:
    def __init__(self, shape):
        self.n = 0
        self.total = np.zeros(shape)
        self.total_sq = np.zeros(shape)

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


def discrete_martingale_residual(traj: DensityTrajectory) -> float:
    """Largest per-step defect of the discrete trace-martingale identity.

    tr gamma_{k+1} - tr gamma_k - sum_j tr(L gamma_k + gamma_k L*) dY_jk
    vanishes identically for the explicit scheme (the Lindblad drift is
    traceless), so this measures accumulated rounding only.  Needs full-grid
    recording.
    """
    if traj.record_stride != 1 or traj.driving is None:
        raise ValueError("residual check needs a full-grid stochastic trajectory")
    rates = _channel_trace_rates(traj.model, traj.matrices)
    traces = traj.trace_path.values
    predicted = np.einsum("jk,jk->k", rates[:, :-1], traj.driving.increments)
    return float(np.max(np.abs(np.diff(traces) - predicted)))


def trace_martingale_report(trajectories, ladder: TruncationLadder | None = None,
                            alpha: float | None = None, beta: float = 0.0,
                            z: float = 4.0, allowance: float = 0.0,
                            residual_check: bool = False) -> dict:
    """Conservativity diagnostics for an ensemble of linear-master trajectories.

    Band test |E tr gamma(t) - tr gamma0| <= z SE + allowance on the full
    grid; optionally the reference-norm growth-bound comparison
    E |gamma(t)|_C <= exp(alpha t)(|gamma0|_C + alpha t (tr gamma0 + beta))
    at the recorded times, and the per-step martingale-identity residual.
    """
    trace_stats = None
    c_stats = None
    grid = None
    rec_times = None
    target = None
    c_start = None
    max_residual = 0.0
    count = 0
    for traj in trajectories:
        if traj.role != "linear":
            raise ValueError("trace diagnostics need linear-role trajectories")
        if trace_stats is None:
            grid = traj.trace_path.times
            rec_times = traj.times
            target = traj.trace_path.values[0]
            trace_stats = _Accumulator(len(grid))
            if ladder is not None:
                c_stats = _Accumulator(len(rec_times))
                c_start = c_trace_norm(traj.matrices[0], ladder)
        trace_stats.add(traj.trace_path.values)
        if c_stats is not None:
            c_stats.add(np.array([c_trace_norm(g, ladder) for g in traj.matrices]))
        if residual_check:
            max_residual = max(max_residual, discrete_martingale_residual(traj))
        count += 1
    if count < 2:
        raise ValueError("trace diagnostics need at least two trajectories")

    mean = trace_stats.mean()
    se = trace_stats.se()
    violated = np.abs(mean - target) > z * se + allowance
    report = {
        "times": grid,
        "mean": mean,
        "se": se,
        "target": target,
        "violated": violated,
        "any_violation": bool(np.any(violated)),
        "trajectories": count,
    }
    if residual_check:
        report["max_residual"] = max_residual
    if c_stats is not None:
        report["recorded_times"] = rec_times
        report["c_mean"] = c_stats.mean()
        report["c_se"] = c_stats.se()
        if alpha is not None:
            rate = max(alpha, 1e-12)
            bound = np.exp(rate * rec_times) * (c_start + rate * rec_times * (target + beta))
            report["bound"] = bound
            report["bound_violated"] = (report["c_mean"] - z * report["c_se"]) > bound
            report["any_bound_violation"] = bool(np.any(report["bound_violated"]))
    return report


def ensemble_mean_master(model, gamma0, T, dt, n_traj, master_seed,
                         record_stride=1, batch_size=64) -> dict:
    """Componentwise mean and SE of the linear master solution over an ensemble.

    The mean solves the deterministic Lindblad equation; SE per entry
    combines the real and imaginary scatter.
    """
    n = n_grid_steps(T, dt)
    gamma0 = _validate_initial(model, gamma0)
    n_rec = (n // record_stride) + 1
    m = model.dim
    total = np.zeros((n_rec, m, m), dtype=complex)
    total_sq = np.zeros((n_rec, m, m))
    count = 0
    for lo in range(0, n_traj, batch_size):
        chunk = np.arange(lo, min(lo + batch_size, n_traj))
        inc = _batch_increments(model.channels, n, dt, master_seed, chunk)
        states, _, _ = _linear_master_batch(model, gamma0, inc, dt, record_stride)
        total += states.sum(axis=0)
        total_sq += (np.abs(states) ** 2).sum(axis=0)
        count += len(chunk)
    mean = total / count
    var = np.maximum(total_sq / count - np.abs(mean) ** 2, 0.0) * count / max(count - 1, 1)
    return {
        "times": (dt * np.arange(n + 1))[::record_stride],
        "mean": mean,
        "se": np.sqrt(var / count),
        "trajectories": count,
    }


def trace_distance(a: np.ndarray, b: np.ndarray) -> float:
    """tr|a - b| via the eigenvalues of the Hermitian difference."""
    return float(np.sum(np.abs(np.linalg.eigvalsh(hermitize(a - b)))))


def hamiltonian_sensitivity(model1: ModelSpec, model2: ModelSpec, gamma0,
                            T, dt, n_traj, master_seed, record_stride=1,
                            z: float = 4.0, allowance: float = 0.0,
                            batch_size=64) -> dict:
    """Continuity of the linear master flow in the Hamiltonian.

    Both models (same couplings, same dimension, Hamiltonians differing by a
    bounded perturbation) are driven by identical noise; the report compares
    E tr|gamma1(t) - gamma2(t)| against the bound 2 t |H2 - H1| tr gamma0,
    flagging excesses beyond z SE + allowance.
    """
    if model1.dim != model2.dim or model1.channels != model2.channels:
        raise DimensionError("models must share dimension and channel count")
    for L1, L2 in zip(model1.couplings, model2.couplings):
        if not np.allclose(L1.entries, L2.entries, atol=1e-12):
            raise DimensionError("models must share the coupling operators")
    gamma0 = _validate_initial(model1, gamma0)
    dH = model1.hamiltonian.entries - model2.hamiltonian.entries
    h_norm = float(np.max(np.abs(np.linalg.eigvalsh(hermitize(dH))))) if np.any(dH) else 0.0
    n = n_grid_steps(T, dt)
    n_rec = (n // record_stride) + 1
    stats = _Accumulator(n_rec)
    for lo in range(0, n_traj, batch_size):
        chunk = np.arange(lo, min(lo + batch_size, n_traj))
        inc = _batch_increments(model1.channels, n, dt, master_seed, chunk)
        s1, _, _ = _linear_master_batch(model1, gamma0, inc, dt, record_stride)
        s2, _, _ = _linear_master_batch(model2, gamma0, inc, dt, record_stride)
        for row in range(len(chunk)):
            stats.add(np.array([trace_distance(a, b) for a, b in zip(s1[row], s2[row])]))
    times = (dt * np.arange(n + 1))[::record_stride]
    bound = 2.0 * times * h_norm * float(np.real(np.trace(gamma0)))
    mean = stats.mean()
    se = stats.se()
    violated = mean > bound + z * se + allowance
    return {
        "times": times,
        "mean": mean,
        "se": se,
        "bound": bound,
        "h_norm": h_norm,
        "violated": violated,
        "any_violation": bool(np.any(violated)),
        "trajectories": stats.n,
    }
