"""Projection-operator integration of several FPCA sources.

The per-source projectors are averaged with sample-size weights. Eigenvalues
of the average equal one exactly on directions every source contains, so the
leading eigenvectors give the shared subspace. Each source's remaining
directions are recovered by removing the shared part from its projector and
re-projecting its covariance onto what is left.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import DiscretizedOperator, EigenSystem, compose, eigendecompose, op_norm
from .spectral import build_projector

__all__ = [
    "IllSeparatedError",
    "SourceIntegration",
    "IntegrationResult",
    "pooled_projection",
    "shared_rank",
    "shared_projection",
    "residual_projector",
    "source_specific_subspace",
    "refined_projection",
    "eigengap_d",
    "integrate_sources",
]

GAP_FLOOR = 1e-3
DEFAULT_THRESHOLD = 0.75


class IllSeparatedError(RuntimeError):
    """Eigenvalues needed to split a subspace are not separated."""


@dataclass(frozen=True, eq=False)
class SourceIntegration:
    source_id: object
    P_d: DiscretizedOperator | None = None
    P_p: DiscretizedOperator | None = None
    P_refined: DiscretizedOperator | None = None


@dataclass(frozen=True, eq=False)
class IntegrationResult:
    P_w: DiscretizedOperator
    P_w_spectrum: EigenSystem
    m_s: int
    P_s: DiscretizedOperator
    per_source: list = field(default_factory=list)

    @property
    def shared_functions(self):
        return self.P_w_spectrum.eigenfunctions[: self.m_s]


def _pairs(sources):
    out = []
    for item in sources:
        if isinstance(item, dict):
            out.append((item["projector"], item["n"]))
        elif hasattr(item, "projector"):
            out.append((item.projector, item.n))
        else:
            out.append(tuple(item))
    if not out:
        raise ValueError("need at least one source")
    grid = out[0][0].grid
    for P, n in out:
        if not P.grid.same_as(grid):
            raise ValueError("all projectors must share one grid")
        if n is None or n <= 0:
            raise ValueError("sample sizes must be positive")
    return out


def pooled_projection(sources) -> DiscretizedOperator:
    """Sample-size weighted average ``sum_k n_k P_k / n_t`` of per-source projectors.

    ``sources`` holds ``(projector, n)`` pairs, dicts with those keys, or objects
    with ``projector`` and ``n`` attributes.
    """
    pairs = _pairs(sources)
    if len(pairs) == 1:
        return pairs[0][0]
    n_t = float(sum(n for _, n in pairs))
    kernel = sum(n * P.kernel for P, n in pairs) / n_t
    return DiscretizedOperator(pairs[0][0].grid, (kernel + kernel.T) / 2)


def shared_rank(spectrum, m_min: int, rule="gap") -> int:
    """Number of shared directions read off the averaged-projector spectrum.

    Parameters
    ----------
    spectrum : sequence of float
        Eigenvalues of the averaged projector, descending.
    m_min : int
        Smallest per-source rank; the shared rank never exceeds it.
    rule : {"gap"} or ("threshold", tau) or ("fixed", m)
        ``gap`` takes the largest drop among the first ``m_min`` eigenvalues and
        falls back to ``m_min`` when no drop exceeds 1e-3. ``threshold`` counts
        eigenvalues at or above ``tau``.
    """
    lam = np.asarray(spectrum, dtype=float)
    if lam.size == 0:
        raise ValueError("empty spectrum")
    if m_min < 1:
        raise ValueError("m_min must be >= 1")
    kind, param = (rule, None) if isinstance(rule, str) else rule
    if kind == "fixed":
        m = int(param)
        if not 1 <= m <= m_min:
            raise ValueError(f"fixed shared rank {m} outside [1, {m_min}]")
        return m
    if kind == "threshold":
        tau = DEFAULT_THRESHOLD if param is None else float(param)
        return int(np.sum(lam >= tau))
    if kind != "gap":
        raise ValueError(f"unknown shared-rank rule {rule!r}")
    if m_min == 1:
        return 1
    head = lam[:m_min]
    # drops[j - 1] is the gap between eigenvalues j and j + 1 (1-based), j < m_min
    drops = head[:-1] - head[1:]
    if drops.size == 0 or drops.max() < GAP_FLOOR:
        return m_min
    return int(np.argmax(drops) + 1)


def shared_projection(P_w: DiscretizedOperator, m_s: int):
    """Projector onto the leading ``m_s`` eigenfunctions of ``P_w``.

    Returns ``(P_s, spectrum)`` where ``spectrum`` is the full eigensystem of ``P_w``.
    """
    if m_s < 1:
        raise ValueError("m_s must be >= 1")
    spectrum = eigendecompose(P_w, len(P_w.grid))
    rank = int(np.sum(spectrum.eigenvalues > 1e-8))
    if m_s > rank:
        raise ValueError(f"m_s={m_s} exceeds the numerical rank {rank} of the averaged projector")
    return build_projector(spectrum, m_s), spectrum


def residual_projector(P_tilde: DiscretizedOperator, P_s: DiscretizedOperator, m_k: int, m_s: int) -> DiscretizedOperator:
    """Projector onto the part of ``range(P_tilde)`` orthogonal to ``range(P_s)``.

    Built from the top ``m_k - m_s`` eigenfunctions of
    ``P_tilde (id - P_s) P_tilde = P_tilde^2 - P_tilde P_s P_tilde``, whose
    eigenvalues on that part are one.
    """
    if not P_tilde.grid.same_as(P_s.grid):
        raise ValueError("projectors live on different grids")
    if m_k <= m_s:
        raise ValueError(f"need m_k > m_s, got m_k={m_k}, m_s={m_s}")
    T = compose(P_tilde, P_tilde) - compose(compose(P_tilde, P_s), P_tilde)
    T = T.symmetrized()
    r = m_k - m_s
    eig = eigendecompose(T, r + 1)
    last, nxt = eig.eigenvalues[r - 1], eig.eigenvalues[r]
    if last < 0.5 or nxt >= 0.5:
        raise IllSeparatedError(
            f"residual spectrum not separated at rank {r}: eigenvalues {last:.4g} and {nxt:.4g}"
        )
    return build_projector(eig, r)


def source_specific_subspace(G_tilde: DiscretizedOperator, P_d: DiscretizedOperator, m_p: int) -> DiscretizedOperator:
    """Projector onto the leading ``m_p`` eigenfunctions of ``P_d G_tilde P_d``."""
    if m_p < 1:
        raise ValueError("m_p must be >= 1")
    G_p = compose(compose(P_d, G_tilde), P_d).symmetrized()
    eig = eigendecompose(G_p, m_p)
    if eig.eigenvalues[m_p - 1] <= 1e-10:
        raise IllSeparatedError(
            f"re-projected covariance has eigenvalue {eig.eigenvalues[m_p - 1]:.3g} at rank {m_p}"
        )
    return build_projector(eig, m_p)


def refined_projection(P_s: DiscretizedOperator, P_p: DiscretizedOperator) -> DiscretizedOperator:
    """Sum of orthogonal shared and source-specific projectors."""
    cross = compose(P_s, P_p)
    overlap = float(np.max(np.abs(np.linalg.svd(cross.weighted_matrix(), compute_uv=False))))
    if overlap > 1e-6:
        raise ValueError(f"shared and specific projectors overlap (norm {overlap:.3g})")
    return P_s + P_p


def eigengap_d(private_projectors) -> float:
    """One minus the operator norm of the weighted average of private projectors."""
    avg = pooled_projection(private_projectors)
    return float(np.clip(1.0 - op_norm(avg), 0.0, 1.0))


def integrate_sources(
    fits: Sequence,
    shared_rule="gap",
    specific: bool = True,
) -> IntegrationResult:
    """Run the full integration on per-source FPCA fits.

    ``fits`` are :class:`~mfpca.spectral.SourceFPCA` objects (with ``n`` set).
    Source-specific parts are computed for every source with ``m_k > m_s``
    when ``specific`` is true.
    """
    fits = list(fits)
    P_w = pooled_projection(fits)
    m_min = min(f.m for f in fits)
    if shared_rule == "equal-rank":
        m_s = m_min
        P_s, spectrum = shared_projection(P_w, m_s)
    else:
        spectrum = eigendecompose(P_w, len(P_w.grid))
        m_s = shared_rank(spectrum.eigenvalues, m_min, shared_rule)
        P_s, spectrum = shared_projection(P_w, m_s)
    if m_s > m_min:
        raise ValueError(f"shared rank {m_s} exceeds the smallest source rank {m_min}")
    per_source = []
    for f in fits:
        if not specific or f.m <= m_s:
            per_source.append(SourceIntegration(f.source_id, P_refined=P_s if f.m == m_s else None))
            continue
        P_d = residual_projector(f.projector, P_s, f.m, m_s)
        P_p = source_specific_subspace(f.covariance, P_d, f.m - m_s)
        per_source.append(SourceIntegration(f.source_id, P_d, P_p, refined_projection(P_s, P_p)))
    return IntegrationResult(P_w, spectrum, m_s, P_s, per_source)
