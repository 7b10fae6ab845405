"""Spectra of conjugate kernels: deformed Marchenko-Pastur bulks and spike maps."""
from ckspectra.activation import (
    CATALOG,
    ActivationError,
    NormalizedActivation,
    gauss_hermite_expect,
    get_activation,
    normalize,
    validate_assumption,
)
from ckspectra.measures import (
    BulkLaw,
    DiscreteMeasure,
    MeasureError,
    affine_pushforward,
    companion,
    make_bulk_law,
    quantile_discretize,
    stieltjes_discrete,
)
from ckspectra.mp_solver import (
    DeformedMPLaw,
    PoleError,
    SolverError,
    compute_support,
    deformed_mp,
    density_at,
    density_grid,
    stieltjes_mp,
    z_of_m,
    z_prime,
)
from ckspectra.spikes import (
    DeepPrediction,
    NetworkSpec,
    SpecError,
    gmm_init,
    phi_at,
    predict_deep,
    propagate_bulk,
    propagate_spikes,
)
from ckspectra.trained import TrainedCkSpec, predict_trained_ck, theta_params

__version__ = "0.1.0"

__all__ = [
    "CATALOG",
    "ActivationError",
    "BulkLaw",
    "DeepPrediction",
    "DeformedMPLaw",
    "DiscreteMeasure",
    "MeasureError",
    "NetworkSpec",
    "NormalizedActivation",
    "PoleError",
    "SolverError",
    "SpecError",
    "TrainedCkSpec",
    "affine_pushforward",
    "companion",
    "compute_support",
    "deformed_mp",
    "density_at",
    "density_grid",
    "gauss_hermite_expect",
    "get_activation",
    "gmm_init",
    "make_bulk_law",
    "normalize",
    "phi_at",
    "predict_deep",
    "predict_trained_ck",
    "propagate_bulk",
    "propagate_spikes",
    "quantile_discretize",
    "stieltjes_discrete",
    "stieltjes_mp",
    "theta_params",
    "validate_assumption",
    "z_of_m",
    "z_prime",
]
