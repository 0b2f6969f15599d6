"""State estimation for parametric elliptic PDEs from a few linear measurements.

The package builds reduced models of a one-dimensional parametric diffusion
problem and uses them to reconstruct the state from sensor data: linear and
affine PBDW reconstruction, worst-case optimal affine maps, greedy sensor
placement, joint greedy selection and piecewise (nonlinear) recovery on
parameter-space partitions.
"""
__version__ = "0.1.0"

from .errors import (CoercivityError, ConditioningError, DomainError, EstimationError, InstabilityError,
                     InvalidInputError, RankError, RedinvError, RefinementStarvationError, SingularMatrixError)
from .linalg_space import (InnerProductSpace, Subspace, gram_matrix, inf_sup_beta, least_captured_direction,
                           orthonormalize, project, stability_constant)
from .forward_pde import (Mesh, ParameterBox, ParametricModel, ReducedBasis, TrainingSet, bump_testbed,
                          elliptic_testbed, greedy_reduced_basis, h1_space, parameter_grid, pod_lower_bound,
                          pod_width_proxy, residual_surrogate, sample_training_set)
from .sensing import (Dictionary, ObservationSetup, add_noise, build_observation, measure, riesz_local_average,
                      riesz_point_eval)
from .pbdw import PbdwOperator
from .affine_optimal import (AffineRecoveryMap, EpigraphProblem, build_problem, primal_dual_solve,
                             project_epigraph, subgradient_baseline)
from .sensor_greedy import GreedyRun, collective_omp, compute_J_fourier, fourier_space, worst_case_omp
from .joint_greedy import JointRun, geim, nested_greedy
from .piecewise import AdmissibleFamily, build_family, estimate, estimate_errors
from .benchmarks import BenchmarkReport, chebyshev_finite, compare_estimators, delta_tilde, framing_interval

__all__ = [
    "CoercivityError", "ConditioningError", "DomainError", "EstimationError", "InstabilityError",
    "InvalidInputError", "RankError", "RedinvError", "RefinementStarvationError", "SingularMatrixError",
    "InnerProductSpace", "Subspace", "gram_matrix", "inf_sup_beta", "least_captured_direction", "orthonormalize",
    "project", "stability_constant", "Mesh", "ParameterBox", "ParametricModel", "ReducedBasis", "TrainingSet",
    "bump_testbed", "elliptic_testbed", "greedy_reduced_basis", "h1_space", "parameter_grid", "pod_lower_bound",
    "pod_width_proxy", "residual_surrogate", "sample_training_set", "Dictionary", "ObservationSetup", "add_noise",
    "build_observation", "measure", "riesz_local_average", "riesz_point_eval", "PbdwOperator", "AffineRecoveryMap",
    "EpigraphProblem", "build_problem", "primal_dual_solve", "project_epigraph", "subgradient_baseline",
    "GreedyRun", "collective_omp", "compute_J_fourier", "fourier_space", "worst_case_omp", "JointRun", "geim",
    "nested_greedy", "AdmissibleFamily", "build_family", "estimate", "estimate_errors", "BenchmarkReport",
    "chebyshev_finite", "compare_estimators", "delta_tilde", "framing_interval",
]
