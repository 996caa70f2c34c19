"""Numerical laboratory for quantum stochastic filtering equations.

Simulates the linear and nonlinear filtering dynamics for pure states and
density matrices on Galerkin truncations (Hermite-function basis), verifies
their structural properties (conservativity, picture equivalence, Lindblad
consistency, growth bounds, truncation convergence), and carries the exactly
solvable Gaussian-kernel filter as an independent analytic oracle.
"""

__version__ = "0.1.0"

from .operators import (  # noqa: F401
    DissipativityReport,
    ModelSpec,
    TruncatedOperator,
    TruncationLadder,
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
from .sde import (  # noqa: F401
    BrownianPath,
    ScalarPath,
    euler_maruyama,
    integrate_scalar,
    refine,
    sample_path,
)
from .pure import (  # noqa: F401
    PureTrajectory,
    galerkin_convergence,
    lift_to_linear,
    martingale_report,
    normalize_trajectory,
    simulate_linear,
    simulate_nonlinear,
)
from .mixed import (  # noqa: F401
    DensityOperator,
    DensityTrajectory,
    WeightedEnsemble,
    c_trace_norm,
    hamiltonian_sensitivity,
    lift_master,
    normalize_master,
    simulate_linear_master,
    simulate_nonlinear_master,
    simulate_vectorized_unraveling,
    solve_lindblad,
    spectral_decompose,
    trace_martingale_report,
)
from .gaussian import (  # noqa: F401
    GaussianKernelState,
    MomentDivergence,
    MomentEstimate,
    apply_kernel,
    coefficient_stats,
    estimate_moment,
    propagate_coefficients,
)
from .config import ExperimentConfig, build_model, load_config  # noqa: F401
from .tasks import girsanov_density_check, run  # noqa: F401
