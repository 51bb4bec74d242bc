"""Evaluation metrics over coefficient sequences."""

from .distances import (
    GMM_COMPONENTS,
    SUBSET_SIZE,
    LatentGaussianSet,
    TransportPlan,
    fit_gmm,
    frechet_distance,
    gaussian_stats,
    multimodality,
    split_subsets,
    transport_lp,
    wind,
    wind_repeated,
)
from .lp import LPResult, solve_lp
from .vae import (
    VaeConfig,
    VaeFeatureExtractor,
    VaeModel,
    cyclical_beta,
    extract_features,
    kl_standard_normal,
    make_windows,
    train_vae,
    window_features,
)

__all__ = [
    "GMM_COMPONENTS", "LPResult", "LatentGaussianSet", "SUBSET_SIZE", "TransportPlan", "VaeConfig",
    "VaeFeatureExtractor", "VaeModel", "cyclical_beta", "extract_features", "fit_gmm", "frechet_distance",
    "gaussian_stats", "kl_standard_normal", "make_windows", "multimodality", "solve_lp", "split_subsets",
    "train_vae", "transport_lp", "wind", "wind_repeated", "window_features",
]
