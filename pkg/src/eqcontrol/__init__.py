"""Equivariant control toolkit: group actions, equivariant fields, bracket
rank tests, switching-flow integration, schedule search and spin-network
Lie closures."""

__version__ = "0.1.0"

from .errors import (
    CapabilityError,
    ConfigurationError,
    DivergenceError,
    EqControlError,
    NumericError,
    PreconditionError,
)
from .group_action import (
    FiniteGroupAction,
    GroupElement,
    Permutation,
    PointCloud,
    StratumSignature,
    orbit_distance,
    reflection_group,
    same_stratum,
    spectrum_signature,
    stratum_signature,
    symmetric_group,
)
from .fields import (
    AttentionKernel,
    AveragedField,
    GaussianPairwiseKernel,
    LiftedField,
    RandomFourierKernel,
    RandomFourierRawField,
    average_over_group,
    equivariance_residual,
    lift,
)
from .flow_engine import Leg, Schedule, Trajectory, discrete_layers, ensemble_run, integrate, run_schedule
from .lie_engine import bracket_span_rank, ensemble_bracket_rank, lie_bracket, perturb_until_generating
from .steering import SteeringOptions, SteeringProblem, SteeringResult, ensemble_steer, refine_schedule, steer
from .spin_lab import lie_closure, symmetric_hamiltonian, symmetric_sector_projector
