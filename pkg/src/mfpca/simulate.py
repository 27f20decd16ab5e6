"""Synthetic multi-source functional data and the Monte Carlo harness.

Curves are Karhunen-Loeve sums over the Fourier basis on [0, 1]; each source
lists its eigenvalues, eigenfunction recipes (Fourier coefficient vectors) and
the indices of its components that span the common subspace.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .core import DiscretizedOperator, Grid, hs_norm, op_norm, uniform_grid
from .estimator import fit_source
from .integrate import integrate_sources
from .smoother import SourceSample, SubjectRecord
from .spectral import SourceFPCA

logger = logging.getLogger(__name__)

__all__ = [
    "fourier_basis",
    "EigenfunctionRecipe",
    "SourceSpec",
    "ScenarioConfig",
    "SCENARIOS",
    "builtin_scenario",
    "generate_source",
    "sample_scenario",
    "curves_on_grid",
    "population_operators",
    "oracle_single_source",
    "MetricsTable",
    "run_replicate",
    "run_monte_carlo",
]

TARGETS = ("shared", "specific", "entire")
ESTIMATORS = ("multi", "oracle1")
NORMS = ("op", "hs")
MAX_EXCLUDED_FRACTION = 0.05


def fourier_basis(nu: int, t):
    """Fourier basis on [0, 1]: 1, then sqrt(2) sin / cos pairs of even frequency."""
    if nu < 1:
        raise ValueError("basis index starts at 1")
    t = np.asarray(t, dtype=float)
    if nu == 1:
        return np.ones_like(t)
    if nu % 2 == 0:
        return math.sqrt(2) * np.sin(nu * np.pi * t)
    return math.sqrt(2) * np.cos((nu - 1) * np.pi * t)


@dataclass(frozen=True)
class EigenfunctionRecipe:
    """Unit-norm combination ``sum coef * phi_index`` of Fourier functions."""

    terms: tuple

    def __post_init__(self):
        terms = tuple((int(i), float(c)) for i, c in self.terms)
        if any(i < 1 for i, _ in terms):
            raise ValueError("Fourier indices start at 1")
        if len({i for i, _ in terms}) != len(terms):
            raise ValueError("repeated Fourier index")
        if abs(sum(c * c for _, c in terms) - 1.0) > 1e-10:
            raise ValueError("recipe coefficients must have unit norm")
        object.__setattr__(self, "terms", terms)

    @classmethod
    def single(cls, index):
        return cls(((index, 1.0),))

    @property
    def max_index(self):
        return max(i for i, _ in self.terms)

    def coefficients(self, size):
        v = np.zeros(size)
        for i, c in self.terms:
            v[i - 1] = c
        return v

    def __call__(self, t):
        return sum(c * fourier_basis(i, t) for i, c in self.terms)


@dataclass(frozen=True)
class SourceSpec:
    """Data-generating description of one source.

    ``rank`` is the number of components the estimator keeps for this source
    (defaults to all listed components); the leading ``rank`` eigenvalues must
    dominate the rest. ``shared_indices`` are 1-based component positions.
    """

    eigenvalues: tuple
    recipes: tuple
    sigma2: float
    n: int
    N: int
    shared_indices: tuple
    rank: int | None = None

    def __post_init__(self):
        lam = tuple(float(v) for v in self.eigenvalues)
        recipes = tuple(self.recipes)
        object.__setattr__(self, "eigenvalues", lam)
        object.__setattr__(self, "recipes", recipes)
        object.__setattr__(self, "shared_indices", tuple(int(i) for i in self.shared_indices))
        if self.rank is None:
            object.__setattr__(self, "rank", len(lam))
        if len(lam) != len(recipes):
            raise ValueError("one recipe per eigenvalue")
        if any(v < 0 for v in lam) or self.sigma2 < 0:
            raise ValueError("variances must be non-negative")
        if not 1 <= self.rank <= len(lam):
            raise ValueError("rank out of range")
        if lam[self.rank :] and min(lam[: self.rank]) <= max(lam[self.rank :]):
            raise ValueError("leading eigenvalues must dominate the tail")
        if not set(self.shared_indices) <= set(range(1, self.rank + 1)):
            raise ValueError("shared indices must lie within the leading rank")
        C = self.coefficient_matrix()
        if not np.allclose(C @ C.T, np.eye(len(recipes)), atol=1e-10):
            raise ValueError("recipes are not orthonormal")
        if self.n < 2 or self.N < 1:
            raise ValueError("need n >= 2 subjects and N >= 1 observations")

    @property
    def max_index(self):
        return max(r.max_index for r in self.recipes)

    def coefficient_matrix(self, size=None):
        size = size or self.max_index
        return np.array([r.coefficients(size) for r in self.recipes])


@dataclass(frozen=True)
class ScenarioConfig:
    sources: tuple
    grid: Grid = field(default_factory=uniform_grid)
    seed: int = 0
    name: str = "custom"

    def __post_init__(self):
        sources = tuple(self.sources)
        object.__setattr__(self, "sources", sources)
        if not sources:
            raise ValueError("need at least one source")
        size = max(s.max_index for s in sources)
        projs = []
        for s in sources:
            C = s.coefficient_matrix(size)[[i - 1 for i in s.shared_indices]]
            projs.append(C.T @ C)
        for P in projs[1:]:
            if np.max(np.abs(np.linalg.eigvalsh(P - projs[0]))) > 1e-8:
                raise ValueError("shared components do not span a common subspace")

    @property
    def n(self):
        return tuple(s.n for s in self.sources)


# ---------------------------------------------------------------------------
# built-in scenarios


def _mix(a, b, angle):
    return EigenfunctionRecipe(((a, math.sin(angle)), (b, math.cos(angle))))


def _half(a, b):
    r = 2**-0.5
    return EigenfunctionRecipe(((a, r), (b, r)))


def sim3src(n=(100, 400, 400), N=50, grid_size=101, seed=0):
    """Three sources sharing span{phi_2, phi_3}."""
    F = EigenfunctionRecipe.single
    theta, omega = math.pi / 4, math.pi / 3
    n1, n2, n3 = n
    return ScenarioConfig(
        (
            SourceSpec((24, 12, 6), (F(1), F(2), F(3)), 0.49, n1, N, (2, 3)),
            SourceSpec(
                (12, 10, 8, 4),
                (F(3), _mix(4, 5, theta), F(2), _mix(6, 7, theta)),
                0.16, n2, N, (1, 3),
            ),
            SourceSpec((20, 10, 5), (_mix(4, 5, omega), F(2), F(3)), 0.16, n3, N, (2, 3)),
        ),
        uniform_grid(grid_size),
        seed,
        "sim3src",
    )


EXAMPLE1_SIGMA2 = 0.1
EXAMPLE1_TERMS = 6


def example1(n=(200, 200), N=25, grid_size=101, seed=0, sigma2=EXAMPLE1_SIGMA2, variant="A"):
    """Two sources with shared span{phi_2, phi_3} hidden behind a larger private component.

    Both sources keep three components. ``variant="B"`` replaces the second
    source's private function by ``(phi_1 + phi_4) / sqrt(2)``, which partly
    overlaps the first source's private direction.
    """
    F = EigenfunctionRecipe.single
    K = EXAMPLE1_TERMS
    lam1 = tuple(v**-2.0 for v in range(1, K + 1))
    rec1 = tuple(F(v) for v in range(1, K + 1))
    lam2 = list(lam1)
    lam2[1], lam2[2] = lam1[2], lam1[1]
    if variant == "A":
        rec2 = [_half(4, 5), F(2), F(3), F(1)] + [_half(2 * v - 4, 2 * v - 3) for v in range(5, K + 1)]
    elif variant == "B":
        rec2 = [_half(1, 4), F(2), F(3), F(5)]
        lam2 = lam2[:4]
    else:
        raise ValueError(f"unknown variant {variant!r}")
    n1, n2 = n
    return ScenarioConfig(
        (
            SourceSpec(lam1, rec1, sigma2, n1, N, (2, 3), rank=3),
            SourceSpec(tuple(lam2), tuple(rec2), sigma2, n2, N, (2, 3), rank=3),
        ),
        uniform_grid(grid_size),
        seed,
        "example1" if variant == "A" else "example2b",
    )


SCENARIOS = {
    "sim3src": sim3src,
    "example1": example1,
    "example2b": lambda **kw: example1(variant="B", **kw),
}


def builtin_scenario(name, **kwargs) -> ScenarioConfig:
    """Look up a built-in scenario; keyword arguments override its defaults."""
    try:
        factory = SCENARIOS[name]
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}") from None
    kwargs = {k: v for k, v in kwargs.items() if v is not None}
    return factory(**kwargs)


# ---------------------------------------------------------------------------
# data generation


def _design(spec, t):
    return np.stack([r(t) for r in spec.recipes], axis=-1)


def generate_source(spec: SourceSpec, rng, source_id=0, return_scores=False):
    """Draw ``spec.n`` subjects with ``spec.N`` uniform observation times each.

    Scores are independent Gaussians with the listed variances, noise is
    Gaussian with variance ``spec.sigma2``.
    """
    rng = np.random.default_rng(rng)
    lam = np.asarray(spec.eigenvalues)
    times = rng.uniform(0.0, 1.0, size=(spec.n, spec.N))
    scores = rng.standard_normal((spec.n, lam.size)) * np.sqrt(lam)
    noise = rng.standard_normal((spec.n, spec.N)) * math.sqrt(spec.sigma2)
    values = np.einsum("ijk,ik->ij", _design(spec, times), scores) + noise
    subjects = [SubjectRecord(i, times[i], values[i]) for i in range(spec.n)]
    sample = SourceSample(source_id, subjects)
    return (sample, scores) if return_scores else sample


def sample_scenario(config: ScenarioConfig, replicate: int = 0):
    """All sources of one replicate, drawn from the ``(seed, replicate, source)`` streams."""
    return [
        generate_source(spec, np.random.default_rng([config.seed, replicate, k]), source_id=k)
        for k, spec in enumerate(config.sources)
    ]


def curves_on_grid(spec: SourceSpec, scores, grid: Grid):
    """Noise-free curves ``sum_v score_v phi_v`` evaluated on ``grid``."""
    return np.asarray(scores) @ _design(spec, grid.points).T


def _projector(spec, grid, indices):
    if not indices:
        return DiscretizedOperator.zeros(grid)
    phi = np.stack([spec.recipes[i - 1](grid.points) for i in indices])
    return DiscretizedOperator(grid, phi.T @ phi)


def population_operators(config: ScenarioConfig) -> dict:
    """True covariances and projectors of every source on the scenario grid."""
    grid = config.grid
    G, P, P_p = [], [], []
    for spec in config.sources:
        phi = _design(spec, grid.points)
        G.append(DiscretizedOperator(grid, (phi * spec.eigenvalues) @ phi.T))
        lead = range(1, spec.rank + 1)
        P.append(_projector(spec, grid, list(lead)))
        P_p.append(_projector(spec, grid, [i for i in lead if i not in spec.shared_indices]))
    P_s = _projector(config.sources[0], grid, list(config.sources[0].shared_indices))
    return {"G": G, "P": P, "P_s": P_s, "P_p": P_p}


def oracle_single_source(fpca: SourceFPCA, shared_indices: Sequence[int]):
    """Split one source's estimated projector using known shared component indices.

    Returns ``(P_s, P_p)``; ``P_p`` is the zero operator when every leading
    component is shared.
    """
    idx = sorted(int(i) for i in shared_indices)
    if not idx or idx[0] < 1 or idx[-1] > fpca.m:
        raise ValueError(f"shared indices must lie in [1, {fpca.m}]")
    phi = fpca.eigensystem.eigenfunctions
    grid = fpca.projector.grid

    def proj(rows):
        if not rows:
            return DiscretizedOperator.zeros(grid)
        f = phi[[r - 1 for r in rows]]
        return DiscretizedOperator(grid, f.T @ f)

    rest = [i for i in range(1, fpca.m + 1) if i not in idx]
    return proj(idx), proj(rest)


# ---------------------------------------------------------------------------
# Monte Carlo


@dataclass
class MetricsTable:
    """Per-replicate subspace errors and their summaries."""

    scenario: str
    n: tuple
    N: int
    M: int
    errors: np.ndarray  # (replicates kept, targets, estimators, norms)
    excluded: int = 0
    failures: list = field(default_factory=list)
    scree: list = field(default_factory=list)
    shared_ranks: list = field(default_factory=list)

    columns = ("scenario", "n1", "n2", "n3", "N", "target", "estimator", "norm", "mean", "sd", "M", "excluded", "se")

    def summary(self, target, estimator, norm):
        e = self.errors[:, TARGETS.index(target), ESTIMATORS.index(estimator), NORMS.index(norm)]
        sd = float(np.std(e, ddof=1)) if e.size > 1 else 0.0
        return float(np.mean(e)), sd, sd / math.sqrt(e.size)

    def mean(self, target, estimator, norm="op"):
        return self.summary(target, estimator, norm)[0]

    def rows(self):
        n = list(self.n) + [""] * (3 - len(self.n))
        for target in TARGETS:
            for est in ESTIMATORS:
                for norm in NORMS:
                    mean, sd, se = self.summary(target, est, norm)
                    yield [self.scenario, *n[:3], self.N, target, est, norm, repr(mean), repr(sd), self.M, self.excluded, repr(se)]

    def to_csv(self, fh=None):
        out = fh or io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(self.columns)
        writer.writerows(self.rows())
        return None if fh else out.getvalue()


def _errors(estimate, truth):
    diff = (estimate - truth).symmetrized()
    return op_norm(diff), hs_norm(diff)


def run_replicate(config: ScenarioConfig, replicate: int, rank_rule="true", bandwidth="cv", shared_rule="gap", folds=10):
    """One Monte Carlo replicate; returns errors, the averaged-projector spectrum and m_s."""
    with threadpool_limits(1):
        fits = []
        for k, (spec, sample) in enumerate(zip(config.sources, sample_scenario(config, replicate))):
            rule = spec.rank if rank_rule == "true" else rank_rule
            fits.append(fit_source(sample, config.grid, rule, bandwidth, folds=folds, seed=[config.seed, replicate, k]))
        result = integrate_sources(fits, shared_rule)
        truth = population_operators(config)

        first = result.per_source[0]
        P_p = first.P_p if first.P_p is not None else DiscretizedOperator.zeros(config.grid)
        P_entire = first.P_refined if first.P_refined is not None else result.P_s + P_p
        oracle_s, oracle_p = oracle_single_source(fits[0], config.sources[0].shared_indices)

        err = np.empty((len(TARGETS), len(ESTIMATORS), len(NORMS)))
        err[0, 0] = _errors(result.P_s, truth["P_s"])
        err[0, 1] = _errors(oracle_s, truth["P_s"])
        err[1, 0] = _errors(P_p, truth["P_p"][0])
        err[1, 1] = _errors(oracle_p, truth["P_p"][0])
        err[2, 0] = _errors(P_entire, truth["P"][0])
        err[2, 1] = _errors(fits[0].projector, truth["P"][0])
        return err, np.array(result.P_w_spectrum.eigenvalues[:10]), result.m_s


def _safe_replicate(args):
    config, r, kwargs = args
    try:
        return run_replicate(config, r, **kwargs)
    except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        return exc


def run_monte_carlo(config: ScenarioConfig, M: int, rank_rule="true", bandwidth="cv", shared_rule="gap", jobs=1, folds=10) -> MetricsTable:
    """Replicate the full pipeline ``M`` times and summarise subspace errors.

    Replicate ``r`` of source ``k`` draws from the stream seeded by
    ``(config.seed, r, k)``, so results do not depend on ``jobs``.

    Raises
    ------
    RuntimeError
        If more than 5% of replicates fail.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    kwargs = {"rank_rule": rank_rule, "bandwidth": bandwidth, "shared_rule": shared_rule, "folds": folds}
    tasks = [(config, r, kwargs) for r in range(M)]
    if jobs and jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_safe_replicate, tasks))
    else:
        outcomes = [_safe_replicate(t) for t in tasks]

    kept, scree, ranks, failures = [], [], [], []
    for r, out in enumerate(outcomes):
        if isinstance(out, Exception):
            failures.append((r, f"{type(out).__name__}: {out}"))
            logger.warning("replicate %d excluded: %s", r, out)
            continue
        kept.append(out[0])
        scree.append(out[1])
        ranks.append(out[2])
    if len(failures) > MAX_EXCLUDED_FRACTION * M:
        raise RuntimeError(f"{len(failures)} of {M} replicates failed; first: {failures[0][1]}")
    return MetricsTable(
        scenario=config.name,
        n=config.n,
        N=config.sources[0].N,
        M=M,
        errors=np.array(kept),
        excluded=len(failures),
        failures=failures,
        scree=scree,
        shared_ranks=ranks,
    )
