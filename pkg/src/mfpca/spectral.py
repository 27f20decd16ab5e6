"""Per-source FPCA: eigenpairs of a smoothed covariance and the rank-m projector."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core import DiscretizedOperator, EigenSystem, eigendecompose

__all__ = ["RankRule", "SourceFPCA", "fit_fpca", "build_projector", "fve_rank"]

POSITIVE_RTOL = 1e-10


@dataclass(frozen=True)
class RankRule:
    """How many components to keep: a fixed ``m`` or an FVE threshold."""

    fixed: int | None = None
    fve: float | None = None

    def __post_init__(self):
        if (self.fixed is None) == (self.fve is None):
            raise ValueError("give exactly one of fixed or fve")
        if self.fixed is not None and self.fixed < 1:
            raise ValueError("fixed rank must be >= 1")
        if self.fve is not None and not 0 < self.fve < 1:
            raise ValueError("FVE threshold must lie in (0, 1)")

    @classmethod
    def parse(cls, value) -> "RankRule":
        """Build from an int (fixed rank), a float in (0, 1) (FVE) or a RankRule."""
        if isinstance(value, RankRule):
            return value
        if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
            return cls(fixed=int(value))
        if isinstance(value, float):
            return cls(fve=value)
        raise ValueError(f"cannot interpret rank rule {value!r}")


@dataclass(frozen=True, eq=False)
class SourceFPCA:
    """FPCA fit of one source.

    ``eigensystem`` holds every non-trivial eigenpair of the smoothed covariance;
    ``projector`` spans the leading ``m`` eigenfunctions.
    """

    eigensystem: EigenSystem
    m: int
    projector: DiscretizedOperator
    covariance: DiscretizedOperator
    source_id: object = None
    n: int | None = None
    sigma2: float = 0.0
    mean: object = None
    bandwidths: dict | None = None

    @property
    def eigenvalues(self):
        return self.eigensystem.eigenvalues[: self.m]

    @property
    def eigenfunctions(self):
        return self.eigensystem.eigenfunctions[: self.m]

    def with_metadata(self, **kwargs) -> "SourceFPCA":
        return replace(self, **kwargs)


def fve_rank(eigenvalues, threshold: float) -> int:
    """Smallest m whose clamped eigenvalues explain at least ``threshold`` of the total."""
    lam = np.clip(np.asarray(eigenvalues, dtype=float), 0.0, None)
    total = lam.sum()
    if total <= 0:
        raise ValueError("no positive eigenvalues")
    frac = np.cumsum(lam) / total
    # guard the comparison against round-off in the cumulative sum
    return int(np.argmax(frac >= threshold - 1e-12) + 1)


def build_projector(eigensystem: EigenSystem, m: int) -> DiscretizedOperator:
    """Kernel ``sum_{v<=m} phi_v(s) phi_v(t)`` of the projector onto the leading m functions."""
    if not 1 <= m <= len(eigensystem):
        raise ValueError(f"m must lie in [1, {len(eigensystem)}], got {m}")
    phi = eigensystem.eigenfunctions[:m]
    k = phi.T @ phi
    return DiscretizedOperator(eigensystem.grid, (k + k.T) / 2)


def fit_fpca(G_hat: DiscretizedOperator, rank_rule=0.95) -> SourceFPCA:
    """Eigendecompose a smoothed covariance and keep components by ``rank_rule``.

    Parameters
    ----------
    G_hat : DiscretizedOperator
        Smoothed covariance surface.
    rank_rule : int, float or RankRule
        Fixed number of components, or FVE threshold in (0, 1).

    Raises
    ------
    ValueError
        If the covariance has no positive eigenvalue, or the requested rank
        exceeds the number of positive eigenvalues.
    """
    rule = RankRule.parse(rank_rule)
    full = eigendecompose(G_hat, len(G_hat.grid))
    lam = full.eigenvalues
    # eigenvalues at round-off level relative to the spectrum count as zero
    tol = POSITIVE_RTOL * float(np.max(np.abs(lam)))
    positive = int(np.sum(lam > tol))
    if positive == 0:
        raise ValueError("covariance has no positive eigenvalues")
    m = rule.fixed if rule.fixed is not None else fve_rank(lam, rule.fve)
    if m > positive:
        raise ValueError(f"requested rank {m} exceeds the {positive} positive eigenvalues")
    eig = EigenSystem(G_hat.grid, lam[:positive], full.eigenfunctions[:positive])
    return SourceFPCA(eig, m, build_projector(eig, m), G_hat)
