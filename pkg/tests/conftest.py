import numpy as np
import pytest

from qsflab.operators import (
    ModelSpec,
    TruncatedOperator,
    build_coupling,
    build_oscillator_ladder,
)


def oscillator_model(m, coupling=(1.0, 0.0), hamiltonian="oscillator"):
    """Position-measurement model with the reference operator as Hamiltonian."""
    if hamiltonian == "oscillator":
        H = TruncatedOperator(
            m, np.diag(build_oscillator_ladder(m).eigenvalues).astype(complex),
            is_hermitian=True, band_width=0,
        )
    elif hamiltonian == "zero":
        H = TruncatedOperator(m, np.zeros((m, m), dtype=complex), True, 0)
    else:
        raise ValueError(hamiltonian)
    return ModelSpec(
        dim=m, hamiltonian=H, couplings=[build_coupling(*coupling, m)],
        control=build_oscillator_ladder(m),
    )


def scalar_model(coupling=1.0):
    """One-mode model dX = -|c|^2 X/2 dt + c X dY for closed-form checks."""
    H = TruncatedOperator(1, np.zeros((1, 1), dtype=complex), True, 0)
    L = TruncatedOperator(1, np.array([[coupling]], dtype=complex),
                          is_hermitian=np.isreal(coupling), band_width=0)
    return ModelSpec(dim=1, hamiltonian=H, couplings=[L],
                     control=build_oscillator_ladder(1))


def qubit_damping_model():
    """Two-level amplitude damping: H = 0, L the lowering operator."""
    H = TruncatedOperator(2, np.zeros((2, 2), dtype=complex), True, 0)
    lower = np.array([[0.0, 1.0], [0.0, 0.0]], dtype=complex)
    L = TruncatedOperator(2, lower, is_hermitian=False, band_width=1)
    return ModelSpec(dim=2, hamiltonian=H, couplings=[L],
                     control=build_oscillator_ladder(2))


@pytest.fixture
def osc8():
    return oscillator_model(8)


@pytest.fixture
def ground_state():
    def make(m):
        e1 = np.zeros(m, dtype=complex)
        e1[0] = 1.0
        return e1
    return make
