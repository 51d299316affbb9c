"""Block-Toeplitz diagonally corrected Kronecker PCA covariance estimation.

Structured spatio-temporal covariance estimates with Ledoit-Wolf shrinkage,
and Gaussian log-likelihood-ratio classifiers built on them.
"""

__version__ = "0.1.0"

from .classifier import (  # noqa: E402
    BlockTree,
    ClassModelSet,
    LlrClassifier,
    SpatialGrid,
    build_block_tree,
    classify_overall,
    classify_track,
    fit_class_models,
    fit_nonneg_logistic,
    gaussian_loglik,
    track_llr_vector,
    train_classifier,
)
from .estimator import (  # noqa: E402
    FitConfig,
    KronCovModel,
    fit_dc_kronpca,
    psd_floor,
    sample_mean_cov,
    select_beta_for_rank,
    soft_impute,
    solve_diag_U,
    svt,
)
from .io_formats import FeatureTrack, read_model, read_tracks, write_model, write_tracks  # noqa: E402
from .kron_algebra import (  # noqa: E402
    SpaceTimeDims,
    build_diag_mask,
    derearrange,
    kron_compose,
    rearrange,
    toeplitz_collapse,
    toeplitz_embed,
)
from .shrinkage import ledoit_wolf_rho, shrink  # noqa: E402
