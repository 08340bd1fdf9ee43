"""Two-stage MRF inference over region x gene x time expression lattices."""

from .lattice import (
    DeMrfParams,
    LatentGrid,
    LatticeShape,
    MrfParams,
    build_edges,
    conditional_logit_de,
    conditional_logit_expr,
    conditional_prob,
    default_groups,
    joint_log_potential,
    log_pseudolikelihood,
    split_groups,
)
from .emission import (
    ExpressionTensor,
    GmmEmissionParams,
    estimate_sigma0,
    fit_plain_gmm,
    log_emission,
    update_theta_mle,
)
from .gibbs import (
    ChainSchedule,
    DeModel,
    ExpressionModel,
    PosteriorGrid,
    configure_threads,
    gibbs_sweep,
    posterior_marginals,
    run_chain,
)

__version__ = "0.1.0"
