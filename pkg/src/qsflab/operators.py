"""Finite-dimensional (Galerkin) operator constructions and dissipativity checks.

All operators live on the span of the first ``m`` Hermite functions, the
eigenbasis of the reference operator ``C = x^2 + p^2`` (hbar = 1), so that C is
diagonal with eigenvalues ``2k - 1``, k = 1..m.  Position, momentum, couplings
``L = a*x + b*p`` and Hamiltonians ``H = p^2 + V(x)`` are represented as dense
complex matrices ``P_m A P_m``.  The module also measures, on samples of unit
C-norm vectors, the constants entering the dissipativity hypotheses that
guarantee well-posedness of the filtering dynamics: the graph-norm constant K,
the dissipativity rate alpha (with beta = 0), and the two commutator ratios of
the sufficient criterion.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InvalidPotentialError

# Relative threshold for Hermiticity / band-structure checks.  The underlying
# algebraic statements are exact; floating point needs a tolerance.
STRUCTURE_RTOL = 1e-12


def _max_abs(a: np.ndarray) -> float:
    return float(np.max(np.abs(a))) if a.size else 0.0


def detect_band_width(entries: np.ndarray) -> int | None:
    """Smallest l such that |A_jk| <= 1e-12 * max|A| whenever |j - k| > l.

    Returns None when no l <= m-2 works (a generic dense matrix).  The trivial
    l = m-1 always "works" and carries no information.
    """
    m = entries.shape[0]
    tol = STRUCTURE_RTOL * _max_abs(entries)
    offsets = np.abs(np.subtract.outer(np.arange(m), np.arange(m)))
    for l in range(m - 1):
        if _max_abs(entries[offsets > l]) <= tol:
            return l
    return None


def band_leakage(entries: np.ndarray, l: int) -> float:
    """Largest off-band magnitude outside band l, relative to max|A|.

    Diagnostic for operators (e.g. Hamiltonians with non-polynomial V) that
    are only approximately banded at finite truncation.
    """
    m = entries.shape[0]
    peak = _max_abs(entries)
    if peak == 0.0:
        return 0.0
    offsets = np.abs(np.subtract.outer(np.arange(m), np.arange(m)))
    outside = entries[offsets > l]
    return _max_abs(outside) / peak if outside.size else 0.0


@dataclass(frozen=True)
class TruncatedOperator:
    """Dense m x m representation P_m A P_m with structural metadata."""

    dim: int
    entries: np.ndarray
    is_hermitian: bool = False
    band_width: int | None = None

    def __post_init__(self):
        if self.dim < 1:
            raise DimensionError(f"operator dimension must be >= 1, got {self.dim}")
        ent = np.asarray(self.entries, dtype=complex)
        if ent.shape != (self.dim, self.dim):
            raise DimensionError(
                f"entries shape {ent.shape} does not match dim {self.dim}"
            )
        object.__setattr__(self, "entries", ent)
        tol = STRUCTURE_RTOL * max(_max_abs(ent), 1e-300)
        if self.is_hermitian and _max_abs(ent - ent.conj().T) > tol:
            raise ValueError("operator flagged Hermitian violates A = A^dagger")
        if self.band_width is not None:
            offsets = np.abs(np.subtract.outer(np.arange(self.dim), np.arange(self.dim)))
            if _max_abs(ent[offsets > self.band_width]) > tol:
                raise ValueError(
                    f"operator has entries outside declared band {self.band_width}"
                )

    @property
    def adjoint_entries(self) -> np.ndarray:
        return self.entries if self.is_hermitian else self.entries.conj().T

    def to_json_dict(self) -> dict:
        """JSON form {dim, re, im, hermitian, band_width} used for caching."""
        return {
            "dim": self.dim,
            "re": self.entries.real.tolist(),
            "im": self.entries.imag.tolist(),
            "hermitian": self.is_hermitian,
            "band_width": self.band_width,
        }

    @staticmethod
    def from_json_dict(obj: dict) -> "TruncatedOperator":
        entries = np.asarray(obj["re"], dtype=float) + 1j * np.asarray(obj["im"], dtype=float)
        return TruncatedOperator(
            dim=int(obj["dim"]),
            entries=entries,
            is_hermitian=bool(obj["hermitian"]),
            band_width=obj.get("band_width"),
        )


@dataclass(frozen=True)
class TruncationLadder:
    """Spectrum of the reference operator C on the first m eigenmodes.

    The working basis is always the C-eigenbasis, so C acts diagonally with
    these eigenvalues.
    """

    dim: int
    eigenvalues: np.ndarray

    def __post_init__(self):
        if self.dim < 1:
            raise DimensionError(f"ladder dimension must be >= 1, got {self.dim}")
        lam = np.asarray(self.eigenvalues, dtype=float)
        if lam.shape != (self.dim,):
            raise DimensionError("eigenvalue count does not match dim")
        if np.any(lam < 0):
            raise ValueError("reference-operator eigenvalues must be nonnegative")
        if np.any(np.diff(lam) < 0):
            raise ValueError("reference-operator eigenvalues must be nondecreasing")
        object.__setattr__(self, "eigenvalues", lam)

    def as_operator(self) -> TruncatedOperator:
        return TruncatedOperator(
            dim=self.dim,
            entries=np.diag(self.eigenvalues.astype(complex)),
            is_hermitian=True,
            band_width=0,
        )


@dataclass(frozen=True)
class ModelSpec:
    """A filtering model: Hamiltonian H, couplings L^1..L^n, reference ladder C."""

    dim: int
    hamiltonian: TruncatedOperator
    couplings: list[TruncatedOperator]
    control: TruncationLadder

    def __post_init__(self):
        if not self.hamiltonian.is_hermitian:
            raise ValueError("Hamiltonian must be Hermitian")
        if self.hamiltonian.dim != self.dim or self.control.dim != self.dim:
            raise DimensionError("model components disagree on dimension")
        if len(self.couplings) < 1:
            raise ValueError("at least one coupling channel is required")
        for L in self.couplings:
            if L.dim != self.dim:
                raise DimensionError("coupling dimension does not match model")

    @property
    def channels(self) -> int:
        return len(self.couplings)

    def coupling_symmetric(self, j: int) -> np.ndarray:
        """L_S = (L + L*)/2 for channel j."""
        L = self.couplings[j].entries
        return 0.5 * (L + L.conj().T)

    def coupling_antisymmetric(self, j: int) -> np.ndarray:
        """L_A = (L - L*)/2i for channel j."""
        L = self.couplings[j].entries
        return (L - L.conj().T) / 2j

    def quadratic_coupling(self) -> np.ndarray:
        """sum_j (L^j)* L^j built from the truncated couplings."""
        m = self.dim
        out = np.zeros((m, m), dtype=complex)
        for L in self.couplings:
            out += L.entries.conj().T @ L.entries
        return out


@dataclass(frozen=True)
class DissipativityReport:
    """Measured constants of the dissipativity hypotheses (beta = 0 fit)."""

    alpha_hat: float
    commutator_CH_ratio: float
    commutator_LC2_ratio: float
    K_hat: float
    satisfied: dict = field(default_factory=dict)

    def commutator_alpha(self) -> float:
        """Rate implied by the commutator criterion: max(4*r_CH, 2*r_LC2)."""
        return max(4.0 * self.commutator_CH_ratio, 2.0 * self.commutator_LC2_ratio)


# ---------------------------------------------------------------------------
# Builders in the Hermite-function basis
# ---------------------------------------------------------------------------

def _lowering(m: int) -> np.ndarray:
    """Ladder operator a with a e_{k+1} = sqrt(k) e_k (1-based modes)."""
    a = np.zeros((m, m), dtype=complex)
    ks = np.arange(1, m)
    a[ks - 1, ks] = np.sqrt(ks)
    return a


def build_oscillator_ladder(m: int, power: int = 1) -> TruncationLadder:
    """Spectrum of (x^2 + p^2)^power on the first m Hermite modes.

    With hbar = 1 the eigenvalues are (2k - 1)^power, k = 1..m, ascending.
    """
    if m < 1:
        raise DimensionError(f"ladder needs m >= 1, got {m}")
    if power < 1:
        raise ValueError("power must be a positive integer")
    lam = (2.0 * np.arange(1, m + 1) - 1.0) ** power
    return TruncationLadder(dim=m, eigenvalues=lam)


def build_position(m: int) -> TruncatedOperator:
    """Position operator: tridiagonal with x_{k,k+1} = sqrt(k/2)."""
    if m < 2:
        raise DimensionError(f"position needs m >= 2, got {m}")
    a = _lowering(m)
    x = (a + a.conj().T) / np.sqrt(2.0)
    return TruncatedOperator(dim=m, entries=x, is_hermitian=True, band_width=1)


def build_momentum(m: int) -> TruncatedOperator:
    """Momentum operator -i d/dx: tridiagonal with p_{k,k+1} = -i sqrt(k/2)."""
    if m < 2:
        raise DimensionError(f"momentum needs m >= 2, got {m}")
    a = _lowering(m)
    p = (a - a.conj().T) / (np.sqrt(2.0) * 1j)
    return TruncatedOperator(dim=m, entries=p, is_hermitian=True, band_width=1)


def build_coupling(a_coef: float, b_coef: float, m: int) -> TruncatedOperator:
    """Coupling L = a*x + b*p with real constant coefficients.

    (0, 0) is accepted (filtering degenerates to a Schroedinger flow) but
    flagged with a warning.
    """
    if a_coef == 0.0 and b_coef == 0.0:
        warnings.warn("zero coupling: observation channel carries no signal")
        if m < 1:
            raise DimensionError(f"coupling needs m >= 1, got {m}")
        return TruncatedOperator(
            dim=m, entries=np.zeros((m, m), dtype=complex),
            is_hermitian=True, band_width=0,
        )
    entries = a_coef * build_position(m).entries + b_coef * build_momentum(m).entries
    return TruncatedOperator(dim=m, entries=entries, is_hermitian=True, band_width=1)


def hermite_values(m: int, x: np.ndarray) -> np.ndarray:
    """Orthonormal Hermite functions h_0..h_{m-1} evaluated at points x.

    Uses the stable three-term recurrence that carries the Gaussian weight
    along, so no large polynomial values appear.  Returns shape (m, len(x)).
    """
    x = np.asarray(x, dtype=float)
    out = np.zeros((m, x.size))
    out[0] = np.pi ** -0.25 * np.exp(-0.5 * x**2)
    if m > 1:
        out[1] = np.sqrt(2.0) * x * out[0]
    for n in range(1, m - 1):
        out[n + 1] = np.sqrt(2.0 / (n + 1)) * x * out[n] - np.sqrt(n / (n + 1)) * out[n - 1]
    return out


def _scaled_hermite_values(m: int, x: np.ndarray) -> np.ndarray:
    """h_n(x) * exp(x^2 / 2): the polynomial part, for Gauss-Hermite sums."""
    x = np.asarray(x, dtype=float)
    out = np.zeros((m, x.size))
    out[0] = np.pi ** -0.25
    if m > 1:
        out[1] = np.sqrt(2.0) * x * out[0]
    for n in range(1, m - 1):
        out[n + 1] = np.sqrt(2.0 / (n + 1)) * x * out[n] - np.sqrt(n / (n + 1)) * out[n - 1]
    return out


def potential_matrix(potential, m: int, quad_nodes: int | None = None) -> np.ndarray:
    """Matrix elements of V(x) in the Hermite basis by Gauss-Hermite quadrature.

    Exact for polynomial V up to the truncation when quad_nodes >= m + deg/2.
    Default node count 2m + 16.
    """
    nq = quad_nodes if quad_nodes is not None else 2 * m + 16
    nodes, weights = np.polynomial.hermite.hermgauss(nq)
    v = np.asarray(potential(nodes), dtype=float)
    if v.shape != nodes.shape:
        v = np.broadcast_to(v, nodes.shape).astype(float)
    if not np.all(np.isfinite(v)):
        raise InvalidPotentialError("potential is non-finite on quadrature support")
    phi = _scaled_hermite_values(m, nodes)
    vmat = (phi * (weights * v)) @ phi.T
    return 0.5 * (vmat + vmat.T)


def build_hamiltonian(potential, m: int, quad_nodes: int | None = None) -> TruncatedOperator:
    """Hamiltonian H = p^2 + V(x) truncated to the first m Hermite modes.

    The kinetic block is the exact projection P_m p^2 P_m (computed from the
    momentum operator at dimension m + 2); the potential block comes from
    Gauss-Hermite quadrature.
    """
    if m < 2:
        raise DimensionError(f"hamiltonian needs m >= 2, got {m}")
    p_big = build_momentum(m + 2).entries
    kinetic = (p_big @ p_big)[:m, :m]
    entries = kinetic + potential_matrix(potential, m, quad_nodes)
    entries = 0.5 * (entries + entries.conj().T)
    return TruncatedOperator(
        dim=m, entries=entries, is_hermitian=True,
        band_width=detect_band_width(entries),
    )


def truncate(op: TruncatedOperator, m: int) -> TruncatedOperator:
    """Top-left m x m block P_m A P_m; band width re-detected (never widened)."""
    if m > op.dim:
        raise DimensionError(f"cannot truncate dim {op.dim} operator to {m}")
    if m < 1:
        raise DimensionError(f"truncation target must be >= 1, got {m}")
    block = op.entries[:m, :m].copy()
    return TruncatedOperator(
        dim=m, entries=block,
        is_hermitian=op.is_hermitian,
        band_width=detect_band_width(block),
    )


def c_norm(x: np.ndarray, ladder: TruncationLadder) -> float:
    """Graph norm of the reference operator: sqrt(|x|^2 + |Cx|^2)."""
    x = np.asarray(x)
    if x.shape != (ladder.dim,):
        raise DimensionError("vector dimension does not match ladder")
    absq = np.abs(x) ** 2
    return float(np.sqrt(np.sum(absq) + np.sum(ladder.eigenvalues**2 * absq)))


# ---------------------------------------------------------------------------
# Dissipativity measurement
# ---------------------------------------------------------------------------

def _hermitian_part(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.conj().T)


def _sup_generalized(M: np.ndarray, w: np.ndarray, samples: np.ndarray,
                     power_steps: int = 50) -> float:
    """sup_x (x^dag M x) / (x^dag diag(w) x) for Hermitian M, positive diag w.

    Random-sample maximum refined by shifted power iteration started at the
    best sample (the shift keeps the dominant eigenvalue the algebraic
    maximum).
    """
    scale = 1.0 / np.sqrt(w)
    S = scale[:, None] * M * scale[None, :]
    S = _hermitian_part(S)
    ys = samples * np.sqrt(w)[None, :]
    ys = ys / np.linalg.norm(ys, axis=1, keepdims=True)
    vals = np.real(np.einsum("ij,jk,ik->i", ys.conj(), S, ys))
    best = float(np.max(vals))
    v = ys[int(np.argmax(vals))].copy()
    shift = float(np.max(np.sum(np.abs(S), axis=1)))  # Gershgorin bound on |spec|
    for _ in range(power_steps):
        v = S @ v + shift * v
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return best
        v = v / nv
    refined = float(np.real(v.conj() @ S @ v))
    return max(best, refined)


def _sample_unit_vectors(m: int, samples: int, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(samples, m)) + 1j * rng.normal(size=(samples, m))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def check_dissipativity(model: ModelSpec, samples: int = 512, seed: int = 0,
                        power_steps: int = 50) -> DissipativityReport:
    """Measure the dissipativity constants of the model (beta = 0 fit).

    alpha_hat is the empirical supremum over unit C-norm vectors of

        D(x) = -2 Re (Cx, iCHx) - Re (Cx, C L*L x) + |CLx|^2,

    divided by |x|_C^2, refined by power iteration on the associated
    quadratic form.  The commutator ratios are the constants of the
    sufficient criterion (|[C,H]x| / |x|_C and sum_k |([L^k,C^2]x, L^k x)|
    / |x|_C^2); the report checks that alpha_hat is covered by the rate
    max(4 r_CH, 2 r_LC2) they imply.  Deterministic given the seed.
    """
    m = model.dim
    lam = model.control.eigenvalues
    w = 1.0 + lam**2  # |x|_C^2 = x^dag diag(w) x
    H = model.hamiltonian.entries
    Ls = [L.entries for L in model.couplings]
    LL = model.quadratic_coupling()
    C2 = lam**2

    scale = _max_abs(H) + sum(_max_abs(L) for L in Ls)
    if scale == 0.0:
        return DissipativityReport(
            alpha_hat=0.0, commutator_CH_ratio=0.0, commutator_LC2_ratio=0.0,
            K_hat=0.0,
            satisfied={"mr0": True, "dissipativity_beta0": True,
                       "commutator_criterion": True},
        )

    xs = _sample_unit_vectors(m, samples, seed)

    # D(x) as a quadratic form.  C is diagonal: (C A)_{jk} = lam_j A_{jk},
    # (A C)_{jk} = A_{jk} lam_k, (C^2 A)_{jk} = lam_j^2 A_{jk}.
    M_D = -2.0 * (C2[:, None] * (1j * H)) - C2[:, None] * LL
    for L in Ls:
        M_D += L.conj().T @ (C2[:, None] * L)
    M_D = _hermitian_part(M_D)
    alpha_hat = _sup_generalized(M_D, w, xs, power_steps)

    # r_CH = sup |[C,H]x| / |x|_C  via the form x^dag (A^dag A) x.
    A_CH = lam[:, None] * H - H * lam[None, :]
    r_CH = np.sqrt(max(_sup_generalized(A_CH.conj().T @ A_CH, w, xs, power_steps), 0.0))

    # r_LC2 = sup sum_k |([L^k, C^2]x, L^k x)| / |x|_C^2.  Not a quadratic
    # form because of the absolute values; refine by phase alignment: fix the
    # phases at the current best point, power-iterate the aligned Hermitian
    # form, repeat.
    Bs = []
    for L in Ls:
        comm = L * C2[None, :] - C2[:, None] * L  # [L, C^2]
        Bs.append(comm.conj().T @ L)

    def lc2_value(x):
        total = 0.0
        for B in Bs:
            total += abs(np.vdot(x, B @ x))
        return total / float(np.real(np.vdot(x, w * x)))

    vals = np.array([lc2_value(x) for x in xs])
    r_LC2 = float(np.max(vals))
    v = xs[int(np.argmax(vals))].copy()
    for _ in range(8):
        phases = [np.exp(-1j * np.angle(np.vdot(v, B @ v))) for B in Bs]
        M_phase = _hermitian_part(sum(ph * B for ph, B in zip(phases, Bs)))
        scale_w = 1.0 / np.sqrt(w)
        S = _hermitian_part(scale_w[:, None] * M_phase * scale_w[None, :])
        shift = float(np.max(np.sum(np.abs(S), axis=1)))
        y = v * np.sqrt(w)
        for _ in range(power_steps // 5):
            y = S @ y + shift * y
            ny = np.linalg.norm(y)
            if ny == 0.0:
                break
            y = y / ny
        v = y / np.sqrt(w)
        r_LC2 = max(r_LC2, lc2_value(v))

    # K of the graph-norm bounds |Hx|^2 <= K |x|_C^2, |L*Lx|^2 <= K |x|_C^2.
    K_H = _sup_generalized(H.conj().T @ H, w, xs, power_steps)
    K_LL = _sup_generalized(LL.conj().T @ LL, w, xs, power_steps)
    K_hat = max(K_H, K_LL, 0.0)

    alpha_comm = max(4.0 * r_CH, 2.0 * r_LC2)
    tol = 1e-9 * max(1.0, abs(alpha_hat))
    satisfied = {
        "mr0": bool(np.isfinite(K_hat)),
        "dissipativity_beta0": bool(np.isfinite(alpha_hat)),
        "commutator_criterion": bool(alpha_hat <= alpha_comm + tol),
    }
    return DissipativityReport(
        alpha_hat=float(alpha_hat),
        commutator_CH_ratio=float(r_CH),
        commutator_LC2_ratio=float(r_LC2),
        K_hat=float(K_hat),
        satisfied=satisfied,
    )
