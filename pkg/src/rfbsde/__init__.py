"""Reflected forward-backward SDEs with Levy jumps: numerical toolkit."""

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .reflection import (  # noqa: F401
    Domain,
    ReflectionSpec,
    RegulatedPath,
    check_oscillation_inequality,
    estimate_kappa,
    is_completely_s,
    is_s_matrix,
    modulus_of_continuity,
    oscillation,
    skorokhod_fixed_point,
    skorokhod_solve,
    skorokhod_solve_batch,
    solve_jump_lcp,
    spectral_radius_condition,
)
from .levy import (  # noqa: F401
    Affine,
    Exponential,
    LevyDriver,
    PointMass,
    Tabulated,
    Uniform,
    compensated_increment,
    sample_ensemble,
    sample_path_grid,
)
from .fbsde import (  # noqa: F401
    CoefficientSet,
    EnsembleSolution,
    FBSDEProblem,
    SolverConfig,
    linear_coefficients,
    picard_iterate,
    simulate_forward,
    solve_backward_lsmc,
    validate_solution,
    weighted_norm,
)
from .queueing import (  # noqa: F401
    QueueNetwork,
    RBMSpec,
    compare_stationary,
    diffusion_scale,
    heavy_traffic_rate,
    simulate_queue,
    simulate_rbm,
)
from .pde import (  # noqa: F401
    GridField,
    HJBCoefficients,
    feynman_kac_dirichlet_poisson,
    hjb_generator_eval,
    rbm_transition_backward,
    spde_bridge,
)
from .games import (  # noqa: F401
    Action,
    GameResult,
    PolicyGrid,
    evaluate_values,
    find_nash,
    find_pareto_nash,
    solve_game,
)
