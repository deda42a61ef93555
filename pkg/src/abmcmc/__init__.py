"""Posterior trajectory sampling for finite-state agent-based models.

Build a model (states, actions, agent timestep, action tensor), bound the
posterior support with a mixed-integer polyhedron, eliminate its equality
constraints onto a sparse integer-preserving basis, and run
Metropolis-Hastings over the free coordinates with proposals shaped by a
linearly factorized approximation of the posterior.
"""

from .basis import (
    BasisReduction,
    InfeasiblePolyhedronError,
    SparseRationalMatrix,
    lift,
    markowitz_cost,
    reduce,
    split_equalities,
    valid_pivots,
)
from .diagnostics import (
    RegionSet,
    autocorrelation,
    effective_samples,
    gelman_rubin,
    occupancy_expectation,
    summary_statistics,
)
from .factors import (
    CalibratedLogRates,
    Factor,
    FactorizedDistribution,
    build_factorized,
    calibrate_multinomial,
    constraint_factors,
    infeasibility,
    log_tilde_p,
    markov_log_prob,
    multinomial_factors,
)
from .model import (
    AbmSpec,
    BoundaryConditions,
    EnumerationLimitExceeded,
    Observation,
    Trajectory,
    enumerate_posterior,
    forecast_log_prob,
    is_continuous,
    posterior_log_prob,
    simulate,
    state_after,
)
from .polyhedron import (
    LinearConstraint,
    MixedIntegerPolyhedron,
    VariableIndexer,
    assemble,
    fermionic_constraints,
    flatten_point,
    noiseless_count_observation,
    trajectory_constraints,
    union_with_zero,
)
from .sampler import (
    ChainConfig,
    ChainResult,
    Perturbation,
    SamplingProblem,
    SumTree,
    acceptance_prob,
    available_backends,
    compile_problem,
    default_backend,
    initialize,
    make_engine,
    propose,
    run_chain,
    step,
    sumtree_draw,
    sumtree_update,
    valid_perturbations,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
