"""Simulation and prediction-based estimation for integrated diffusions.

The package simulates window-averaged observations of a latent scalar
ergodic diffusion, builds prediction-based estimating equations for its
parameters, and verifies the associated small-window/long-horizon limit
theory (expansions, consistency, normality) by quadrature oracles and
Monte Carlo studies.
"""

from .errors import (
    BoundaryDegeneracyError,
    ConfigError,
    DegeneratePredictorError,
    DiagnosticsUnreliableError,
    IntdiffError,
    InvalidStudyError,
    NoRootError,
    NotErgodicError,
    PreconditionError,
    SimulationDivergedError,
    StateSpaceError,
)
from .functions import FUNCTIONS, SmoothFunction, get_function, polynomial
from .model import (
    DiffusionModel,
    InvariantMeasure,
    StateSpace,
    generator_apply,
    get_model,
    h_operator_apply,
    invariant_measure,
    k_f,
    mu_integral,
)
from .pbef import (
    CoefficientVector,
    EstimatorResult,
    MomentProvider,
    PredictorSpec,
    coeffs_exact,
    coeffs_expansion,
    gn_onelag,
    gn_simple,
    moment_corrections,
    moment_expansions,
    solve,
)
from .potential import (
    LimitObjects,
    PotentialSolution,
    avar_scalar,
    center,
    limit_objects,
    potential_derivative,
    variance_identity_forms,
)
from .mc import (
    ExperimentConfig,
    StudyReport,
    functional_clt_check,
    rate_study,
    run_study,
)
from .simulate import (
    EulerItoRecord,
    SamplingScheme,
    TrajectoryBundle,
    euler_ito_decompose_x,
    euler_ito_decompose_y,
    remainder_order_fit,
    simulate_path,
    simulate_paths,
)

__version__ = "0.1.0"
