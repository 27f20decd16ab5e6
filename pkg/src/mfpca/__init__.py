"""Shared and source-specific functional principal subspaces of multi-source data.

The estimators in :mod:`mfpca.estimator` follow the scikit-learn API; the
lower-level building blocks live in :mod:`mfpca.core`, :mod:`mfpca.smoother`,
:mod:`mfpca.spectral`, :mod:`mfpca.integrate` and :mod:`mfpca.simulate`.
"""

from .core import (
    DiscretizedOperator,
    EigenSystem,
    Grid,
    GridFunction,
    GridMismatchError,
    compose,
    eigendecompose,
    hs_norm,
    op_norm,
    outer,
    uniform_grid,
    weighted_inner,
)
from .estimator import FPCA, MultiSourceFPCA, fit_source
from .integrate import (
    IllSeparatedError,
    IntegrationResult,
    eigengap_d,
    integrate_sources,
    pooled_projection,
    refined_projection,
    residual_projector,
    shared_projection,
    shared_rank,
    source_specific_subspace,
)
from .smoother import RawCovariance, SingularDesignError, SourceSample, SubjectRecord
from .spectral import RankRule, SourceFPCA, fit_fpca
from .validation import DataError

__all__ = [
    "DataError",
    "DiscretizedOperator",
    "EigenSystem",
    "FPCA",
    "Grid",
    "GridFunction",
    "GridMismatchError",
    "IllSeparatedError",
    "IntegrationResult",
    "MultiSourceFPCA",
    "RankRule",
    "RawCovariance",
    "SingularDesignError",
    "SourceFPCA",
    "SourceSample",
    "SubjectRecord",
    "compose",
    "eigendecompose",
    "eigengap_d",
    "fit_fpca",
    "fit_source",
    "hs_norm",
    "integrate_sources",
    "op_norm",
    "outer",
    "pooled_projection",
    "refined_projection",
    "residual_projector",
    "shared_projection",
    "shared_rank",
    "source_specific_subspace",
    "uniform_grid",
    "weighted_inner",
]
