"""Pure-state filtering tests.

Scalar closed forms (Ito): with H = 0, L = 1 the linear equation gives
chi(t) = chi0 exp(Y(t) - t) and the inverse norm solves u = exp(-2B - 2t).
"""

import numpy as np
import pytest

from conftest import oscillator_model, scalar_model
from qsflab.operators import TruncatedOperator, build_oscillator_ladder
from qsflab.pure import (
    galerkin_convergence,
    iter_trajectories,
    lift_to_linear,
    martingale_report,
    normalize_trajectory,
    roundtrip_error,
    simulate_linear,
    simulate_nonlinear,
)
from qsflab.sde import refine, sample_path
from qsflab.operators import ModelSpec


class TestSimulateLinear:
    def test_trivial_model_constant(self, ground_state):
        m = 4
        zero = TruncatedOperator(m, np.zeros((m, m), dtype=complex), True, 0)
        model = ModelSpec(dim=m, hamiltonian=zero, couplings=[zero],
                          control=build_oscillator_ladder(m))
        path = sample_path(1, 0.5, 0.05, master_seed=1)
        traj = simulate_linear(model, ground_state(m), path)
        assert np.allclose(traj.states, traj.states[0][None, :])
        assert np.allclose(traj.norm_sq.values, 1.0)

    def test_scalar_closed_form(self):
        model = scalar_model(1.0)
        path = sample_path(1, 1.0, 1e-3, master_seed=5)
        traj = simulate_linear(model, np.array([1.0 + 0j]), path)
        exact = np.exp(path.cumulative()[0] - path.times)
        # strong-order-1/2 agreement along the whole path
        assert np.max(np.abs(traj.states[:, 0] - exact)) < 0.1
        fine = refine(path, 4)
        traj4 = simulate_linear(model, np.array([1.0 + 0j]), fine)
        err_fine = np.max(np.abs(traj4.states[::4, 0] - exact))
        assert err_fine < np.max(np.abs(traj.states[:, 0] - exact))

    def test_oscillator_norm_martingale(self, ground_state):
        model = oscillator_model(8)
        trajs = iter_trajectories(model, ground_state(8), T=0.2, dt=1e-3,
                                  n_traj=400, master_seed=11)
        report = martingale_report(trajs, z=4.0, allowance=0.01)
        assert not report["any_violation"]

    def test_batched_matches_single(self, ground_state):
        model = oscillator_model(6)
        trajs = list(iter_trajectories(model, ground_state(6), T=0.1, dt=1e-2,
                                       n_traj=3, master_seed=4))
        for traj in trajs:
            single = simulate_linear(model, ground_state(6), traj.driving)
            assert np.allclose(single.states, traj.states, atol=1e-12)


class TestSimulateNonlinear:
    def test_identity_coupling_freezes_state(self):
        # L = 1 recenters to zero: with H = 0 the state does not move.
        model = scalar_model(1.0)
        path = sample_path(1, 0.5, 1e-2, master_seed=2)
        traj = simulate_nonlinear(model, np.array([1.0 + 0j]), path)
        assert np.allclose(traj.states, 1.0)

    def test_unit_norm_enforced_and_defect_small(self, ground_state):
        model = oscillator_model(8)
        path = sample_path(1, 0.2, 1e-3, master_seed=3)
        traj = simulate_nonlinear(model, ground_state(8), path)
        assert np.max(np.abs(np.linalg.norm(traj.states, axis=1) - 1.0)) < 1e-12
        assert traj.renorm_defect.max() < 0.05

    def test_renorm_defect_scales_linearly_in_dt(self, ground_state):
        # the max over steps is extreme-value noisy on one path, so the
        # O(dt) factor-of-two law is checked on the ensemble average
        model = oscillator_model(8)
        coarse_max, fine_max = [], []
        for idx in range(20):
            path = sample_path(1, 0.2, 2e-3, master_seed=9, trajectory_index=idx)
            coarse = simulate_nonlinear(model, ground_state(8), path)
            fine = simulate_nonlinear(model, ground_state(8), refine(path, 2))
            coarse_max.append(coarse.renorm_defect.max())
            fine_max.append(fine.renorm_defect.max())
        ratio = np.mean(coarse_max) / np.mean(fine_max)
        assert 1.5 <= ratio <= 2.5

    def test_batched_matches_single(self, ground_state):
        model = oscillator_model(6)
        trajs = list(iter_trajectories(model, ground_state(6), T=0.1, dt=1e-2,
                                       n_traj=3, master_seed=8, kind="nonlinear"))
        for traj in trajs:
            single = simulate_nonlinear(model, ground_state(6), traj.driving)
            assert np.allclose(single.states, traj.states, atol=1e-9)


class TestPictureConversions:
    def test_zero_coupling_keeps_noise(self, ground_state):
        m = 4
        zero = TruncatedOperator(m, np.zeros((m, m), dtype=complex), True, 0)
        model = ModelSpec(dim=m, hamiltonian=zero, couplings=[zero],
                          control=build_oscillator_ladder(m))
        path = sample_path(1, 0.5, 0.05, master_seed=6)
        linear = simulate_linear(model, ground_state(m), path)
        normalized, innovation = normalize_trajectory(linear)
        assert np.allclose(innovation, path.increments)
        assert np.allclose(np.linalg.norm(normalized.states, axis=1), 1.0)
        lifted, output = lift_to_linear(normalized)
        assert np.allclose(lifted.norm_sq.values, 1.0)
        assert np.allclose(output, path.increments)

    def test_roundtrip_lift_then_normalize_is_identity(self, ground_state):
        model = oscillator_model(8)
        path = sample_path(1, 0.2, 1e-3, master_seed=7)
        phi = simulate_nonlinear(model, ground_state(8), path)
        lifted, _ = lift_to_linear(phi)
        recovered, innovation = normalize_trajectory(lifted)
        assert np.max(np.abs(recovered.states - phi.states)) < 1e-10
        assert np.max(np.abs(innovation - path.increments)) < 1e-10

    def test_scalar_inverse_norm_closed_form(self):
        # u = 1/|chi|^2 solves du = -2u dB -> u = exp(-2B(t) - 2t)
        model = scalar_model(1.0)
        path = sample_path(1, 0.5, 1e-4, master_seed=12)
        phi = simulate_nonlinear(model, np.array([1.0 + 0j]), path)
        lifted, _ = lift_to_linear(phi)
        exact = np.exp(2.0 * path.cumulative()[0] + 2.0 * path.times)
        assert np.max(np.abs(lifted.norm_sq.values - exact) / exact) < 0.05

    def test_roundtrip_error_converges(self, ground_state):
        model = oscillator_model(8)
        base = sample_path(1, 0.2, 4e-3, master_seed=21)
        errors = [
            roundtrip_error(model, ground_state(8), base),
            roundtrip_error(model, ground_state(8), refine(base, 2)),
            roundtrip_error(model, ground_state(8), refine(base, 4)),
        ]
        assert errors[2] < errors[0]


class TestGalerkinConvergence:
    def test_block_diagonal_model_has_zero_errors(self, ground_state):
        models = []
        for m in (4, 8, 16):
            H = TruncatedOperator(m, np.diag(np.arange(1, m + 1)).astype(complex), True, 0)
            L = TruncatedOperator(m, np.diag(0.1 * np.arange(1, m + 1)).astype(complex), True, 0)
            models.append(ModelSpec(dim=m, hamiltonian=H, couplings=[L],
                                    control=build_oscillator_ladder(m)))
        paths = [sample_path(1, 0.2, 1e-2, master_seed=31, trajectory_index=i) for i in range(3)]
        table = galerkin_convergence(models, ground_state(4), paths)
        assert np.all(table["errors"] == 0.0)

    def test_oscillator_errors_decrease(self, ground_state):
        models = [oscillator_model(m) for m in (4, 8, 16, 32)]
        paths = [sample_path(1, 0.2, 2e-3, master_seed=32, trajectory_index=i) for i in range(10)]
        table = galerkin_convergence(models, ground_state(4), paths)
        assert table["strictly_decreasing"]
        assert table["slope"] <= -0.4


class TestMartingaleReport:
    def test_zero_coupling_zero_variance(self, ground_state):
        m = 3
        zero = TruncatedOperator(m, np.zeros((m, m), dtype=complex), True, 0)
        model = ModelSpec(dim=m, hamiltonian=zero, couplings=[zero],
                          control=build_oscillator_ladder(m))
        trajs = iter_trajectories(model, ground_state(m), T=0.2, dt=0.05,
                                  n_traj=8, master_seed=2)
        report = martingale_report(trajs)
        assert np.allclose(report["mean"], 1.0)
        assert np.allclose(report["se"], 0.0)
        assert not report["any_violation"]

    def test_growth_bound_with_measured_rate(self, ground_state):
        from qsflab.operators import check_dissipativity

        model = oscillator_model(8)
        rate = check_dissipativity(model, samples=256, seed=1).alpha_hat
        trajs = iter_trajectories(model, ground_state(8), T=0.2, dt=1e-3,
                                  n_traj=300, master_seed=13)
        report = martingale_report(trajs, ladder=model.control, alpha=rate,
                                   z=3.0, allowance=0.01)
        assert not report["any_bound_violation"]

    def test_requires_linear_role(self, ground_state):
        model = oscillator_model(4)
        path = sample_path(1, 0.1, 1e-2, master_seed=1)
        phi = simulate_nonlinear(model, ground_state(4), path)
        with pytest.raises(ValueError):
            martingale_report([phi, phi])
