"""Jump and diffusive stochastic master equations for open quantum systems."""

from .generators import (
    ScanResult,
    TestFunctional,
    WeightFunctional,
    generator_eps,
    generator_limit,
    martingale_residual,
    uniform_convergence_scan,
)
from .harness import (
    ConvergenceReport,
    EnsembleSummary,
    Model,
    diffusion_approximation_study,
    heterodyne_delta_study,
    ks_distance,
    mean_check,
    preset,
    run_ensemble,
    wasserstein1,
)
from .models import (
    HeterodyneParams,
    HomodyneParams,
    build_heterodyne,
    build_heterodyne_limit,
    build_homodyne_jump,
    build_homodyne_limit,
)
from .noise import StreamKey, intensity_bound
from .simulate import (
    Modulation,
    SimConfig,
    TrajectoryPath,
    lindblad_ode_solve,
    simulate_diffusive,
    simulate_jump_diffusion,
)
from .states import (
    DensityMatrix,
    DimensionMismatchError,
    InvalidStateError,
    Observable,
    OperatorSet,
    StateProjectionError,
    check_condition,
    diffusive_drift,
    jump_map,
    lindblad_apply,
    project_to_state,
)

__version__ = "0.1.0"
