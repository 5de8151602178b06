"""Distributed lag non-linear models with spatially structured cluster mixtures."""

from .graph import AdjacencyGraph, car_conditional, grid_graph, load_adjacency, path_graph
from .model import (
    ModelData,
    ModelSpec,
    PanelDataset,
    ParameterState,
    PriorSpec,
    Variant,
    assignment_probabilities,
    linear_predictor,
    log_likelihood,
    log_posterior,
    log_prior,
    nb_log_pmf,
    pointwise_loglik,
)
from .outputs import (
    ClusterSummary,
    CumulativeRR,
    RRSurface,
    WAIC,
    cluster_summary,
    cumulative_rr,
    effect_summaries,
    effective_sample_size,
    entropy,
    rr_surface,
    waic,
)
from .sampler import Chain, PosteriorDraws, SamplerConfig, SamplerInitError, run_chain
from .simulate import SimulationScenario, adjusted_rand_index, simulate_panel
from .splines import (
    CrossBasis,
    CrossBasisSpec,
    SplineSpec,
    build_crossbasis,
    default_crossbasis_spec,
    natural_spline_basis,
)

__version__ = "0.1.0"
