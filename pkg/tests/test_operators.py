"""Operator construction and dissipativity-check tests.

Derived expectations are computed by independent routes (Gauss-Hermite
quadrature, diagonalization of ladder-built matrices, analytic band formulas)
rather than by the builders under test.
"""

import json

import numpy as np
import pytest

from qsflab.errors import DimensionError, InvalidPotentialError
from qsflab.operators import (
    DissipativityReport,
    ModelSpec,
    TruncatedOperator,
    TruncationLadder,
    band_leakage,
    build_coupling,
    build_hamiltonian,
    build_momentum,
    build_oscillator_ladder,
    build_position,
    c_norm,
    check_dissipativity,
    detect_band_width,
    truncate,
)


def ladder_xp(m):
    """Independent ladder-matrix construction of x and p for oracles."""
    a = np.zeros((m, m), dtype=complex)
    ks = np.arange(1, m)
    a[ks - 1, ks] = np.sqrt(ks)
    x = (a + a.conj().T) / np.sqrt(2)
    p = (a - a.conj().T) / (np.sqrt(2) * 1j)
    return x, p


def quadrature_position(m, nq=40):
    """Oracle: matrix of x in the Hermite basis via Gauss-Hermite quadrature."""
    nodes, weights = np.polynomial.hermite.hermgauss(nq)
    phi = np.zeros((m + 1, nodes.size))
    phi[0] = np.pi ** -0.25
    phi[1] = np.sqrt(2.0) * nodes * phi[0]
    for n in range(1, m):
        phi[n + 1] = np.sqrt(2.0 / (n + 1)) * nodes * phi[n] - np.sqrt(n / (n + 1)) * phi[n - 1]
    return (phi[:m] * (weights * nodes)) @ phi[:m].T


class TestOscillatorLadder:
    def test_corner_eigenvalues_match_diagonalization(self):
        # Oracle: diagonalize x^2 + p^2 built from ladder matrices at m=8 and
        # read the low (truncation-clean) end of the spectrum.
        x, p = ladder_xp(8)
        spectrum = np.sort(np.linalg.eigvalsh(x @ x + p @ p))
        assert np.allclose(build_oscillator_ladder(1).eigenvalues, spectrum[:1], atol=1e-10)
        assert np.allclose(build_oscillator_ladder(3).eigenvalues, spectrum[:3], atol=1e-10)
        assert np.allclose(build_oscillator_ladder(3).eigenvalues, [1.0, 3.0, 5.0])

    def test_power_squares_eigenvalues(self):
        assert np.allclose(build_oscillator_ladder(2, power=2).eigenvalues, [1.0, 9.0])

    def test_ordering_invariant(self):
        for m in (1, 5, 33):
            lam = build_oscillator_ladder(m).eigenvalues
            assert np.all(np.diff(lam) >= 0) and np.all(lam >= 0)

    def test_zero_dimension_rejected(self):
        with pytest.raises(DimensionError):
            build_oscillator_ladder(0)


class TestPositionMomentum:
    def test_position_matches_quadrature_oracle(self):
        expected = quadrature_position(2)
        assert np.allclose(build_position(2).entries, expected, atol=1e-12)
        assert np.allclose(build_position(2).entries, [[0, np.sqrt(0.5)], [np.sqrt(0.5), 0]])
        assert np.allclose(build_position(6).entries, quadrature_position(6), atol=1e-12)

    def test_momentum_structure(self):
        p = build_momentum(2)
        assert p.is_hermitian and p.band_width == 1
        assert np.allclose(p.entries, p.entries.conj().T)

    def test_canonical_commutator_on_interior_modes(self):
        # Exact before truncation; the last two modes feel the cut corner.
        m = 9
        x = build_position(m).entries
        p = build_momentum(m).entries
        comm = x @ p - p @ x
        interior = comm[: m - 2, : m - 2]
        assert np.allclose(interior, 1j * np.eye(m - 2), atol=1e-12)
        assert abs(comm[-1, -1] - 1j) > 1.0  # corner row deviates


class TestCoupling:
    def test_pure_position(self):
        assert np.allclose(build_coupling(1.0, 0.0, 3).entries, build_position(3).entries)

    def test_zero_coupling_flagged(self):
        with pytest.warns(UserWarning):
            L = build_coupling(0.0, 0.0, 3)
        assert np.all(L.entries == 0)

    def test_mixed_coupling_hermitian(self):
        assert build_coupling(1.0, 1.0, 3).is_hermitian


class TestHamiltonian:
    def test_free_hamiltonian_is_projected_p_squared(self):
        # Oracle: exact band formula for P_m p^2 P_m in the Hermite basis.
        m = 5
        n = np.arange(m)
        expected = np.diag(n + 0.5).astype(complex)
        sub = -np.sqrt((n[:-2] + 1) * (n[:-2] + 2)) / 2.0
        expected += np.diag(sub, 2) + np.diag(sub, -2)
        H = build_hamiltonian(lambda x: 0.0 * x, m)
        assert np.allclose(H.entries, expected, atol=1e-12)

    def test_quadratic_potential_recovers_oscillator_spectrum(self):
        H = build_hamiltonian(lambda x: x**2, 4)
        assert np.allclose(np.linalg.eigvalsh(H.entries), [1.0, 3.0, 5.0, 7.0], atol=1e-10)

    def test_cosine_potential_hermitian(self):
        H = build_hamiltonian(np.cos, 8)
        assert np.max(np.abs(H.entries - H.entries.conj().T)) < 1e-10

    def test_nonfinite_potential_rejected(self):
        with pytest.raises(InvalidPotentialError):
            build_hamiltonian(lambda x: 1.0 / (x - x[0]), 4)

    def test_band_leakage_reported_for_nonpolynomial_potential(self):
        # non-polynomial V couples modes far apart; no tight band survives,
        # and the leakage beyond any small band is measurable
        H = build_hamiltonian(np.cos, 12)
        assert H.band_width is None or H.band_width > 2
        assert band_leakage(H.entries, 2) > 0.0


class TestTruncate:
    def test_identity(self):
        ident = TruncatedOperator(5, np.eye(5, dtype=complex), True, 0)
        assert np.allclose(truncate(ident, 3).entries, np.eye(3))

    def test_nested_tridiagonal(self):
        assert np.allclose(truncate(build_position(8), 4).entries, build_position(4).entries)

    def test_band_never_widens(self):
        op = build_position(8)
        assert truncate(op, 4).band_width <= op.band_width

    def test_dimension_error(self):
        with pytest.raises(DimensionError):
            truncate(build_position(4), 6)


class TestCNorm:
    def test_basis_vector(self):
        ladder = TruncationLadder(2, np.array([1.0, 3.0]))
        e1 = np.array([1.0, 0.0], dtype=complex)
        assert np.isclose(c_norm(e1, ladder), np.sqrt(2.0))

    def test_zero_vector(self):
        ladder = build_oscillator_ladder(4)
        assert c_norm(np.zeros(4, dtype=complex), ladder) == 0.0

    def test_hand_value(self):
        ladder = TruncationLadder(2, np.array([1.0, 3.0]))
        x = np.array([1.0, 1.0]) / np.sqrt(2.0)
        assert np.isclose(c_norm(x, ladder), np.sqrt(6.0))


class TestBandWidth:
    def test_identity(self):
        assert detect_band_width(np.eye(4)) == 0

    def test_tridiagonal(self):
        assert detect_band_width(build_position(8).entries) == 1

    def test_dense_random_absent(self):
        rng = np.random.default_rng(3)
        A = rng.normal(size=(6, 6)) + 1j * rng.normal(size=(6, 6))
        A = A + A.conj().T
        assert detect_band_width(A) is None


def oscillator_model(m, potential=None, coupling=(1.0, 0.0)):
    if potential is None:
        H = TruncatedOperator(
            m, np.diag(build_oscillator_ladder(m).eigenvalues).astype(complex),
            is_hermitian=True, band_width=0,
        )
    else:
        H = build_hamiltonian(potential, m)
    L = build_coupling(*coupling, m)
    return ModelSpec(dim=m, hamiltonian=H, couplings=[L], control=build_oscillator_ladder(m))


class TestDissipativity:
    def test_trivial_model_all_zero(self):
        m = 4
        zero = TruncatedOperator(m, np.zeros((m, m), dtype=complex), True, 0)
        model = ModelSpec(dim=m, hamiltonian=zero, couplings=[zero],
                          control=build_oscillator_ladder(m))
        report = check_dissipativity(model, samples=64, seed=1)
        assert report.alpha_hat == 0.0 and report.K_hat == 0.0
        assert all(report.satisfied.values())

    def test_oscillator_position_model(self):
        m = 16
        zero_H = TruncatedOperator(m, np.zeros((m, m), dtype=complex), True, 0)
        model = ModelSpec(dim=m, hamiltonian=zero_H,
                          couplings=[build_coupling(1.0, 0.0, m)],
                          control=build_oscillator_ladder(m))
        report = check_dissipativity(model, samples=256, seed=7)
        assert np.isfinite(report.alpha_hat) and report.alpha_hat > 0
        assert report.commutator_CH_ratio < 1e-9
        assert all(report.satisfied.values())

    def test_commuting_hamiltonian_has_zero_CH_ratio(self):
        model = oscillator_model(12)  # H equals the reference operator
        report = check_dissipativity(model, samples=128, seed=2)
        assert report.commutator_CH_ratio < 1e-9

    def test_deterministic_given_seed(self):
        model = oscillator_model(8)
        r1 = check_dissipativity(model, samples=64, seed=11)
        r2 = check_dissipativity(model, samples=64, seed=11)
        assert r1.alpha_hat == r2.alpha_hat and r1.K_hat == r2.K_hat

    def test_mr0_consistency_on_fresh_samples(self):
        m = 16
        model = oscillator_model(m, potential=lambda x: x**2)
        report = check_dissipativity(model, samples=256, seed=5)
        rng = np.random.default_rng(99)
        H = model.hamiltonian.entries
        LL = model.quadratic_coupling()
        lam = model.control.eigenvalues
        for _ in range(64):
            x = rng.normal(size=m) + 1j * rng.normal(size=m)
            cn2 = c_norm(x, model.control) ** 2
            assert np.linalg.norm(H @ x) ** 2 <= report.K_hat * cn2 * (1 + 1e-9)
            assert np.linalg.norm(LL @ x) ** 2 <= report.K_hat * cn2 * (1 + 1e-9)


class TestProjectionErrorLaw:
    def test_banded_operator_projection_bound(self):
        # |(A - P_m A P_m) x| <= sqrt(2R / lambda_{m-l+1}) |x|_C for banded A
        # with |Ax|^2 <= R |x| |x|_C, tested inside a larger ambient space.
        M, l = 48, 1
        A = build_position(M).entries
        ladder = build_oscillator_ladder(M)
        lam = ladder.eigenvalues
        rng = np.random.default_rng(17)
        xs = rng.normal(size=(400, M)) + 1j * rng.normal(size=(400, M))
        # fit the graph-norm constant R on a broad sample, with headroom
        ratios = []
        for x in xs:
            ratios.append(np.linalg.norm(A @ x) ** 2 / (np.linalg.norm(x) * c_norm(x, ladder)))
        R = 1.05 * max(ratios)
        for m in (8, 16, 32):
            Am = np.zeros_like(A)
            Am[:m, :m] = A[:m, :m]
            bound_factor = np.sqrt(2 * R / lam[m - l])  # lambda_{m-l+1}, 1-based
            for x in xs[:100]:
                lhs = np.linalg.norm((A - Am) @ x)
                assert lhs <= bound_factor * c_norm(x, ladder) * (1 + 1e-9)


class TestSerialization:
    def test_json_round_trip(self):
        op = build_hamiltonian(np.cos, 6)
        payload = json.dumps(op.to_json_dict())
        back = TruncatedOperator.from_json_dict(json.loads(payload))
        assert back.dim == op.dim
        assert np.allclose(back.entries, op.entries)
        assert back.is_hermitian == op.is_hermitian
        assert back.band_width == op.band_width


class TestInvariantEnforcement:
    def test_hermitian_flag_validated(self):
        bad = np.array([[0.0, 1.0], [0.5, 0.0]], dtype=complex)
        with pytest.raises(ValueError):
            TruncatedOperator(2, bad, is_hermitian=True)

    def test_band_flag_validated(self):
        dense = np.ones((4, 4), dtype=complex)
        with pytest.raises(ValueError):
            TruncatedOperator(4, dense, band_width=1)

    def test_ladder_ordering_validated(self):
        with pytest.raises(ValueError):
            TruncationLadder(3, np.array([3.0, 1.0, 5.0]))
        with pytest.raises(ValueError):
            TruncationLadder(2, np.array([-1.0, 1.0]))

    def test_commutator_alpha_covers_direct_measurement(self):
        report = check_dissipativity(oscillator_model(12), samples=256, seed=3)
        assert report.alpha_hat <= report.commutator_alpha() + 1e-9
