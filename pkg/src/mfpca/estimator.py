"""scikit-learn style estimators for single- and multi-source FPCA."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .core import DiscretizedOperator, eigendecompose, uniform_grid
from .integrate import eigengap_d, integrate_sources
from .smoother import (
    DEFAULT_BANDWIDTHS,
    estimate_error_variance,
    estimate_mean,
    raw_covariance_points,
    select_bandwidth,
    select_mean_bandwidth,
    smooth_covariance,
)
from .spectral import RankRule, SourceFPCA, fit_fpca
from .validation import check_curves, check_long_data

__all__ = ["fit_source", "parse_shared_rule", "FPCA", "MultiSourceFPCA"]


def fit_source(sample, grid, rank_rule=0.95, bandwidth="cv", folds=10, seed=0, candidates=DEFAULT_BANDWIDTHS) -> SourceFPCA:
    """Smooth one source's mean and covariance, then run FPCA on the result.

    Parameters
    ----------
    sample : SourceSample
    grid : Grid
    rank_rule : int, float or RankRule
        Fixed rank or FVE threshold.
    bandwidth : "cv" or float
        ``"cv"`` selects the mean and covariance bandwidths separately by
        subject-blocked cross-validation; a number is used for both.
    """
    if bandwidth == "cv":
        h_mu = select_mean_bandwidth(sample, candidates, folds=folds, seed=seed)
    else:
        h_mu = float(bandwidth)
    mean = estimate_mean(sample, grid, h_mu)
    raw = raw_covariance_points(sample, mean)
    h_cov = select_bandwidth(raw, candidates, folds=folds, seed=seed) if bandwidth == "cv" else float(bandwidth)
    G = smooth_covariance(raw, grid, h_cov)
    sigma2 = estimate_error_variance(sample, mean, G, h_cov)
    fit = fit_fpca(G, rank_rule)
    return fit.with_metadata(
        source_id=sample.source_id,
        n=sample.n,
        sigma2=sigma2,
        mean=mean,
        bandwidths={"mean": h_mu, "covariance": h_cov},
    )


def parse_shared_rule(rule):
    """Normalise a shared-rank rule.

    Accepts ``"gap"``, ``"equal-rank"``, ``"threshold"``, ``"threshold:0.8"``,
    ``"fixed:2"``, a positive int (fixed), or an already parsed tuple.
    """
    if isinstance(rule, tuple):
        return rule
    if isinstance(rule, (int, np.integer)) and not isinstance(rule, bool):
        return ("fixed", int(rule))
    if not isinstance(rule, str):
        raise ValueError(f"cannot interpret shared-rank rule {rule!r}")
    if rule in ("gap", "equal-rank"):
        return rule
    kind, _, param = rule.partition(":")
    if kind == "threshold":
        return ("threshold", float(param) if param else None)
    if kind == "fixed" and param:
        return ("fixed", int(param))
    raise ValueError(f"cannot interpret shared-rank rule {rule!r}")


class FPCA(TransformerMixin, BaseEstimator):
    """Functional PCA of one sparse or dense longitudinal sample.

    Parameters
    ----------
    n_components : int or float, default=0.95
        Number of components, or a fraction-of-variance-explained threshold in (0, 1).
    grid_size : int, default=101
        Points of the uniform output grid on [0, 1].
    bandwidth : "cv" or float, default="cv"
        Smoothing bandwidth, or cross-validated selection.
    cv_folds : int, default=10
    random_state : int, default=0
        Seed for fold assignment.

    Attributes
    ----------
    grid_ : Grid
    mean_ : GridFunction
    covariance_ : DiscretizedOperator
    eigenvalues_ : ndarray of shape (n_components_,)
    components_ : ndarray of shape (n_components_, grid_size)
    projector_ : DiscretizedOperator
    noise_variance_ : float
    bandwidths_ : dict
    """

    def __init__(self, n_components=0.95, grid_size=101, bandwidth="cv", cv_folds=10, random_state=0):
        self.n_components = n_components
        self.grid_size = grid_size
        self.bandwidth = bandwidth
        self.cv_folds = cv_folds
        self.random_state = random_state

    def fit(self, X, y=None):
        samples = check_long_data(X)
        if len(samples) != 1:
            raise ValueError(f"FPCA expects a single source, got {len(samples)}")
        RankRule.parse(self.n_components)
        self.grid_ = uniform_grid(self.grid_size)
        fit = fit_source(samples[0], self.grid_, self.n_components, self.bandwidth, self.cv_folds, self.random_state)
        self._set_from(fit)
        return self

    def _set_from(self, fit):
        self.fpca_ = fit
        self.mean_ = fit.mean
        self.covariance_ = fit.covariance
        self.n_components_ = fit.m
        self.eigenvalues_ = np.array(fit.eigenvalues)
        self.components_ = np.array(fit.eigenfunctions)
        self.projector_ = fit.projector
        self.noise_variance_ = fit.sigma2
        self.bandwidths_ = dict(fit.bandwidths or {})

    def transform(self, X):
        """Scores of curves given on the grid: ``int (x - mean) phi_v``."""
        check_is_fitted(self, "components_")
        X = check_curves(X, self.grid_)
        return (X - self.mean_.values) * self.grid_.weights @ self.components_.T


class MultiSourceFPCA(TransformerMixin, BaseEstimator):
    """Shared and source-specific principal subspaces of several sources.

    Each source is smoothed and decomposed separately; the projectors onto the
    leading components are averaged with sample-size weights, and the leading
    eigenfunctions of that average span the shared subspace. For every source
    with more components than the shared rank, a source-specific subspace
    orthogonal to the shared one is extracted from its own covariance.

    Parameters
    ----------
    n_components : int, float or dict, default=0.95
        Per-source rank rule (fixed rank or FVE threshold); a dict maps
        source ids to rules.
    shared_rank : str or int, default="gap"
        ``"gap"``, ``"threshold[:tau]"``, ``"fixed:m"``, ``"equal-rank"`` or an int.
    specific : bool, default=True
        Whether to estimate source-specific subspaces.
    grid_size, bandwidth, cv_folds, random_state
        As in :class:`FPCA`.

    Attributes
    ----------
    source_ids_ : list
    sources_ : list of SourceFPCA
    P_w_ : DiscretizedOperator
        Weighted average projector.
    pw_eigenvalues_ : ndarray
    n_shared_ : int
    P_shared_ : DiscretizedOperator
    shared_components_ : ndarray of shape (n_shared_, grid_size)
    specific_ : dict
        Source id to :class:`~mfpca.integrate.SourceIntegration`.
    eigengap_ : float
        One minus the norm of the averaged source-specific projectors.
    """

    def __init__(self, n_components=0.95, shared_rank="gap", specific=True, grid_size=101, bandwidth="cv", cv_folds=10, random_state=0):
        self.n_components = n_components
        self.shared_rank = shared_rank
        self.specific = specific
        self.grid_size = grid_size
        self.bandwidth = bandwidth
        self.cv_folds = cv_folds
        self.random_state = random_state

    def _rule_for(self, source_id):
        if isinstance(self.n_components, dict):
            return self.n_components[source_id]
        return self.n_components

    def fit(self, X, y=None, rescale_time=False):
        samples = check_long_data(X, rescale_time=rescale_time)
        self.grid_ = uniform_grid(self.grid_size)
        fits = [
            fit_source(s, self.grid_, self._rule_for(s.source_id), self.bandwidth, self.cv_folds, self.random_state)
            for s in samples
        ]
        return self.fit_sources(fits)

    def fit_sources(self, fits):
        """Integrate already fitted per-source FPCA results."""
        fits = list(fits)
        self.grid_ = fits[0].projector.grid
        result = integrate_sources(fits, parse_shared_rule(self.shared_rank), specific=self.specific)
        self.result_ = result
        self.sources_ = fits
        self.source_ids_ = [f.source_id for f in fits]
        self.P_w_ = result.P_w
        self.pw_eigenvalues_ = np.array(result.P_w_spectrum.eigenvalues)
        self.n_shared_ = result.m_s
        self.P_shared_ = result.P_s
        self.shared_components_ = np.array(result.shared_functions)
        self.specific_ = {r.source_id: r for r in result.per_source}
        private = [
            (r.P_p if r.P_p is not None else DiscretizedOperator.zeros(self.grid_), f.n)
            for r, f in zip(result.per_source, fits)
        ]
        self.eigengap_ = eigengap_d(private)
        return self

    def transform(self, X):
        """Coordinates of grid-evaluated curves in the shared eigenbasis."""
        check_is_fitted(self, "shared_components_")
        X = check_curves(X, self.grid_)
        return X * self.grid_.weights @ self.shared_components_.T

    def specific_components(self, source_id):
        """Orthonormal basis (rows) of a source's specific subspace, or None."""
        check_is_fitted(self, "specific_")
        part = self.specific_[source_id]
        if part.P_p is None:
            return None
        rank = int(round(np.trace(part.P_p.weighted_matrix())))
        return np.array(eigendecompose(part.P_p, rank).eigenfunctions)
