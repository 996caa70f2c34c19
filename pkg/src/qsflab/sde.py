"""Reproducible Brownian driving paths and strong Euler-Maruyama stepping.

Noise streams come from the counter-based Philox generator keyed by a
(master_seed, trajectory_index) pair, so distinct trajectories never share a
stream and any trajectory can be regenerated bit-for-bit in isolation.  The
integrator is plain explicit Euler-Maruyama over one shared uniform grid; the
diffusion terms of the filtering equations are state-proportional, so the
scheme is strong order 1/2 and per-step corrections (renormalization,
hermitization) are injected through a post_step hook.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import BlowUpError, GridError

MAX_STEPS = 50_000_000


def _philox_key(tag: str) -> int:
    """Stable 128-bit Philox key from a textual stream tag."""
    digest = hashlib.blake2b(tag.encode(), digest_size=16).digest()
    return int.from_bytes(digest, "little")


def stream_generator(master_seed: int, trajectory_index: int,
                     domain: str = "path") -> np.random.Generator:
    """Counter-based generator for one (seed, trajectory) noise stream."""
    key = _philox_key(f"{domain}:{master_seed}:{trajectory_index}")
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(master_seed: int, label: str) -> int:
    """Fold a task label into a master seed, giving a new 63-bit seed."""
    digest = hashlib.blake2b(f"{master_seed}:{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


@dataclass(frozen=True)
class BrownianPath:
    """n-channel Brownian increments on a uniform grid.

    increments[j, k] is the k-th increment of channel j, distributed
    N(0, dt).  Regenerating with the same (master_seed, trajectory_index,
    grid) reproduces the increments bit-for-bit.
    """

    channels: int
    horizon: float
    dt: float
    increments: np.ndarray
    master_seed: int
    trajectory_index: int

    @property
    def n_steps(self) -> int:
        return self.increments.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)

    def cumulative(self) -> np.ndarray:
        """Path values W(t_k), shape (channels, n_steps + 1), W(0) = 0."""
        out = np.zeros((self.channels, self.n_steps + 1))
        np.cumsum(self.increments, axis=1, out=out[:, 1:])
        return out


@dataclass(frozen=True)
class ScalarPath:
    """A scalar process sampled on the grid of its parent Brownian path."""

    times: np.ndarray
    values: np.ndarray
    regularized: bool = False

    def __post_init__(self):
        if self.times.shape != self.values.shape[:1]:
            raise GridError("scalar path values do not match grid length")


def n_grid_steps(horizon: float, dt: float) -> int:
    """Number of steps for horizon T and step dt; T/dt must be integral."""
    if dt <= 0:
        raise GridError(f"dt must be positive, got {dt}")
    if horizon < dt:
        raise GridError(f"horizon {horizon} shorter than one step {dt}")
    steps = horizon / dt
    n = int(round(steps))
    if abs(steps - n) > 1e-9 * max(1.0, abs(steps)):
        raise GridError(f"T/dt = {steps} is not integral")
    if n > MAX_STEPS:
        raise GridError(f"grid of {n} steps exceeds supported size")
    return n


def sample_path(channels: int, horizon: float, dt: float,
                master_seed: int, trajectory_index: int = 0) -> BrownianPath:
    """Draw the increments of an n-channel Brownian path on a uniform grid."""
    n = n_grid_steps(horizon, dt)
    rng = stream_generator(master_seed, trajectory_index)
    increments = rng.normal(0.0, np.sqrt(dt), size=(channels, n))
    return BrownianPath(
        channels=channels, horizon=horizon, dt=dt, increments=increments,
        master_seed=master_seed, trajectory_index=trajectory_index,
    )


def refine(path: BrownianPath, factor: int) -> BrownianPath:
    """Brownian-bridge refinement of the grid by a power-of-two factor.

    Each halving splits every increment into two conditionally-correct
    halves whose sum reproduces the coarse increment exactly.  The bridge
    noise for a halving is keyed by (seed, index, current step count), so
    refine(refine(p, 2), 2) and refine(p, 4) give bitwise identical paths.
    """
    if factor < 2 or factor & (factor - 1) != 0:
        raise GridError(f"refinement factor must be a power of two >= 2, got {factor}")
    inc = path.increments
    dt = path.dt
    while factor > 1:
        n = inc.shape[1]
        key = _philox_key(
            f"refine:{path.master_seed}:{path.trajectory_index}:{n}"
        )
        rng = np.random.Generator(np.random.Philox(key=key))
        xi = rng.normal(0.0, 1.0, size=inc.shape)
        half = 0.5 * inc
        bump = 0.5 * np.sqrt(dt) * xi
        fine = np.empty((inc.shape[0], 2 * n))
        fine[:, 0::2] = half + bump
        fine[:, 1::2] = half - bump
        inc = fine
        dt = 0.5 * dt
        factor //= 2
    return BrownianPath(
        channels=path.channels, horizon=path.horizon, dt=dt, increments=inc,
        master_seed=path.master_seed, trajectory_index=path.trajectory_index,
    )


def coarsen(path: BrownianPath, factor: int) -> BrownianPath:
    """Sum consecutive increments; exact inverse of refine on the increments."""
    if factor < 1 or path.n_steps % factor != 0:
        raise GridError(f"cannot coarsen {path.n_steps} steps by {factor}")
    inc = path.increments.reshape(path.channels, -1, factor).sum(axis=2)
    return BrownianPath(
        channels=path.channels, horizon=path.horizon, dt=path.dt * factor,
        increments=inc, master_seed=path.master_seed,
        trajectory_index=path.trajectory_index,
    )


def euler_maruyama(drift, diffusions, x0: np.ndarray, path: BrownianPath,
                   post_step=None) -> np.ndarray:
    """Strong Euler-Maruyama stepping of dx = drift(x) dt + sum_j diff_j(x) dW_j.

    The state may be a complex vector or a complex matrix; diffusions is one
    map per noise channel.  post_step, when given, is applied to the state
    after every step (renormalization, hermitization).  Returns the recorded
    trajectory of shape (n_steps + 1, *x0.shape).

    Raises BlowUpError (carrying the step index) as soon as the state stops
    being finite.
    """
    if len(diffusions) != path.channels:
        raise GridError(
            f"{len(diffusions)} diffusion maps for {path.channels} noise channels"
        )
    x = np.array(x0, dtype=complex)
    n = path.n_steps
    out = np.empty((n + 1,) + x.shape, dtype=complex)
    out[0] = x
    dt = path.dt
    # overflow here is an anticipated failure mode, reported via BlowUpError
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n):
            step = drift(x) * dt
            for j, diff in enumerate(diffusions):
                step = step + diff(x) * path.increments[j, k]
            x = x + step
            if post_step is not None:
                x = post_step(x)
            if not np.all(np.isfinite(x.view(float))):
                raise BlowUpError(k + 1)
            out[k + 1] = x
    return out


def integrate_scalar(path: BrownianPath, integrand, kind: str = "ito",
                     channel: int = 0) -> ScalarPath:
    """Cumulative integral of a deterministic integrand along the grid.

    kind "ito":  left-point sums of integral f(s) dB(s) on the given channel.
    kind "time": trapezoid sums of integral f(s) ds.

    A non-finite integrand value at t = 0 (e.g. 1/s^2) switches the start to
    the first grid point; the returned path is flagged ``regularized``.
    """
    times = path.times
    f = np.asarray(integrand(times), dtype=float)
    if f.shape != times.shape:
        f = np.broadcast_to(f, times.shape).astype(float)
    regularized = not np.isfinite(f[0])
    if regularized:
        f = f.copy()
        f[0] = 0.0
    if not np.all(np.isfinite(f)):
        raise GridError("integrand is non-finite away from t = 0")
    values = np.zeros(times.shape)
    if kind == "ito":
        np.cumsum(f[:-1] * path.increments[channel], out=values[1:])
    elif kind == "time":
        weights = 0.5 * (f[:-1] + f[1:]) * path.dt
        if regularized:
            weights[0] = 0.0  # drop the leading cell entirely
        np.cumsum(weights, out=values[1:])
    else:
        raise ValueError(f"unknown integral kind {kind!r}")
    return ScalarPath(times=times, values=values, regularized=regularized)
