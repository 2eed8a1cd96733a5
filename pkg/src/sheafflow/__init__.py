"""Entropic sheaf flow: interacting particle dynamics for counterfactual
measures on a causal DAG.

Per-node drifts are assembled from entropic optimal-transport dual
potentials (forward stress from parents) and mechanism-pullback stresses
(vector-Jacobian products toward children). The package also provides
implicit-function-theorem gradients through the Sinkhorn fixed point,
tangent-sheaf (Hodge) diagnostics, and a topological causal-discovery
scorer, all wired into a config-driven experiment CLI.
"""

from .graph import (
    Affine,
    CausalGraph,
    Composite,
    CycleDetected,
    DimMismatch,
    EdgeSpec,
    GraphError,
    NodeSpec,
    Shift,
    SmoothResidual,
    UnknownNode,
    apply_mechanism,
    mechanism_jacobian,
    mechanism_jacobian_fd,
    mechanism_vjp,
    validate_graph,
)
from .measures import (
    ParticleCloud,
    center_of_mass,
    load_cloud,
    pushforward,
    sample_gaussian,
    store_cloud,
    total_variance,
)
from .sinkhorn import (
    SinkhornConfig,
    SinkhornSolution,
    cost_matrix,
    entropic_cost,
    potential_gradient_source,
    potential_gradient_target,
    primal_cost,
    sinkhorn_solve,
)
from .implicit import (
    OptimalityJacobian,
    SolverStalled,
    TapeCounter,
    grad_positions_envelope,
    grad_positions_ift,
    hessian_condition_estimate,
    ift_adjoint_solve,
    unrolled_grad,
)
from .flow import (
    EnergyTrace,
    FlowConfig,
    FlowDiverged,
    FlowEngine,
    FlowState,
    dirichlet_energy,
    langevin_step,
    node_drift,
    run_flow,
    tearing_diagnostics,
)
from .hodge import (
    EdgeCochain,
    TangentField,
    TransportAligner,
    build_aligners,
    coboundary,
    coboundary_adjoint,
    extremal_eigen_estimate,
    harmonic_residual,
    sheaf_laplacian_apply,
)
from .discovery import (
    Candidate,
    CandidateSet,
    ScoreReport,
    rank_candidates,
    stable_seed,
    topological_score,
)

__version__ = "0.1.0"
