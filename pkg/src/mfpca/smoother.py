"""Local-linear smoothing of the mean, covariance surface and noise variance.

Observations are pooled across subjects. To keep the cost independent of the
number of raw points, each smoother first reduces its input to per-bin sums
(count, centred position moments, response moments) on a fine lattice. The
kernel weight of a point is evaluated at its bin centre, while the local design
uses the exact point positions, so constants and linear functions are still
reproduced exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .core import DiscretizedOperator, Grid, GridFunction

__all__ = [
    "SubjectRecord",
    "SourceSample",
    "RawCovPoint",
    "RawCovariance",
    "SingularDesignError",
    "DEFAULT_BANDWIDTHS",
    "epanechnikov",
    "local_linear_1d",
    "estimate_mean",
    "raw_covariance_points",
    "smooth_covariance",
    "select_bandwidth",
    "select_mean_bandwidth",
    "estimate_error_variance",
]

# geometric ladder 0.05 * 1.5**k capped at 0.4
DEFAULT_BANDWIDTHS = tuple(round(0.05 * 1.5**k, 6) for k in range(6))

N_BINS_1D = 400
N_BINS_2D = 200
N_BINS_CV_1D = 100
N_BINS_CV_2D = 50
MAX_WIDENINGS = 3
_DET_TOL = 1e-10


class SingularDesignError(RuntimeError):
    """A local design stayed singular after widening the bandwidth."""


@dataclass(frozen=True, eq=False)
class SubjectRecord:
    subject_id: object
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).ravel()
        y = np.asarray(self.values, dtype=float).ravel()
        if t.size != y.size or t.size < 1:
            raise ValueError(
                f"subject {self.subject_id!r}: need matching, non-empty times and values"
            )
        if np.any((t < 0) | (t > 1)) or not np.all(np.isfinite(t)):
            raise ValueError(f"subject {self.subject_id!r}: times must lie in [0, 1]")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", y)

    def __len__(self):
        return self.times.size


@dataclass(frozen=True, eq=False)
class SourceSample:
    source_id: object
    subjects: tuple

    def __post_init__(self):
        subjects = tuple(self.subjects)
        if len(subjects) < 2:
            raise ValueError(f"source {self.source_id!r}: need at least 2 subjects")
        object.__setattr__(self, "subjects", subjects)

    @property
    def n(self) -> int:
        return len(self.subjects)

    def pooled(self):
        """Concatenated times, values and subject positions."""
        times = np.concatenate([s.times for s in self.subjects])
        values = np.concatenate([s.values for s in self.subjects])
        owner = np.repeat(np.arange(self.n), [len(s) for s in self.subjects])
        return times, values, owner


class RawCovPoint(NamedTuple):
    s: float
    t: float
    c: float
    subject_id: object


@dataclass(frozen=True, eq=False)
class RawCovariance:
    """Columnar store of off-diagonal raw covariance products.

    Iterating yields :class:`RawCovPoint` tuples. ``subject`` holds integer
    positions into ``subject_ids``.
    """

    s: np.ndarray
    t: np.ndarray
    c: np.ndarray
    subject: np.ndarray
    subject_ids: tuple = ()

    def __len__(self):
        return self.s.size

    def __iter__(self) -> Iterator[RawCovPoint]:
        ids = self.subject_ids
        for s, t, c, k in zip(self.s, self.t, self.c, self.subject):
            yield RawCovPoint(float(s), float(t), float(c), ids[k] if ids else int(k))

    @classmethod
    def from_points(cls, points: Sequence[RawCovPoint]) -> "RawCovariance":
        ids = []
        index = {}
        owner = []
        for p in points:
            if p.subject_id not in index:
                index[p.subject_id] = len(ids)
                ids.append(p.subject_id)
            owner.append(index[p.subject_id])
        arr = np.array([(p.s, p.t, p.c) for p in points], dtype=float).reshape(-1, 3)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2], np.array(owner, dtype=int), tuple(ids))


def _as_raw(points) -> RawCovariance:
    if isinstance(points, RawCovariance):
        return points
    return RawCovariance.from_points(list(points))


def epanechnikov(u):
    u = np.asarray(u, dtype=float)
    return 0.75 * np.clip(1.0 - u * u, 0.0, None)


def _centres(n_bins):
    return (np.arange(n_bins) + 0.5) / n_bins


def _bin_index(x, n_bins):
    return np.minimum((np.asarray(x) * n_bins).astype(int), n_bins - 1)


def _kernel_powers(centres, x, h):
    """``K(e) e^p`` for p = 0, 1, 2 with ``e = (centre - x) / h``."""
    e = (centres[None, :] - np.asarray(x, dtype=float)[:, None]) / h
    k0 = epanechnikov(e)
    k1 = k0 * e
    return k0, k1, k1 * e


# ---------------------------------------------------------------------------
# one-dimensional smoother


class _Stats1D:
    """Per-bin sums for a 1-D local-linear fit."""

    fields = ("n", "d1", "d2", "y0", "y1", "yy")

    def __init__(self, arrays, n_bins):
        self.arrays = arrays
        self.n_bins = n_bins
        self.centres = _centres(n_bins)

    @classmethod
    def build(cls, x, y, n_bins, groups=None, n_groups=1):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        b = _bin_index(x, n_bins)
        d = x - _centres(n_bins)[b]
        idx = b if groups is None else groups * n_bins + b
        size = n_bins * n_groups
        cols = (np.ones_like(x), d, d * d, y, y * d, y * y)
        arrays = {
            name: np.bincount(idx, weights=col, minlength=size).reshape(n_groups, n_bins)
            for name, col in zip(cls.fields, cols)
        }
        if groups is None:
            return cls({k: v[0] for k, v in arrays.items()}, n_bins)
        return [cls({k: v[g] for k, v in arrays.items()}, n_bins) for g in range(n_groups)]

    def minus(self, other):
        return _Stats1D({k: self.arrays[k] - other.arrays[k] for k in self.fields}, self.n_bins)

    def line(self, x, h):
        """Intercept, scaled slope and a singular mask of the local line at ``x``."""
        a = self.arrays
        k0, k1, k2 = _kernel_powers(self.centres, x, h)
        s0 = k0 @ a["n"]
        s1 = k0 @ a["d1"] / h + k1 @ a["n"]
        s2 = k0 @ a["d2"] / h**2 + 2 * k1 @ a["d1"] / h + k2 @ a["n"]
        t0 = k0 @ a["y0"]
        t1 = k0 @ a["y1"] / h + k1 @ a["y0"]
        det = s0 * s2 - s1 * s1
        with np.errstate(divide="ignore", invalid="ignore"):
            bad = ~(s0 > 0) | ~(det > _DET_TOL * s0 * s0)
            safe = np.where(bad, 1.0, det)
            intercept = np.where(bad, np.nan, (s2 * t0 - s1 * t1) / safe)
            slope = np.where(bad, np.nan, (s0 * t1 - s1 * t0) / safe)
        return intercept, slope, bad

    def line_widened(self, x, h):
        x = np.asarray(x, dtype=float)
        a, b, bad = self.line(x, h)
        width = np.full(x.shape, float(h))
        for _ in range(MAX_WIDENINGS):
            if not bad.any():
                break
            h = 2 * h
            a2, b2, bad2 = self.line(x[bad], h)
            where = np.flatnonzero(bad)
            a[where], b[where], width[where] = a2, b2, h
            bad[where] = bad2
        return a, b, width, bad


def local_linear_1d(x, y, eval_points, bandwidth, n_bins=N_BINS_1D):
    """Local-linear regression of ``y`` on ``x`` evaluated at ``eval_points``.

    Raises
    ------
    SingularDesignError
        If a window still holds fewer than two distinct positions after
        doubling the bandwidth three times.
    """
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    stats = _Stats1D.build(x, y, n_bins)
    eval_points = np.asarray(eval_points, dtype=float)
    fit, _, _, bad = stats.line_widened(eval_points, bandwidth)
    if bad.any():
        where = eval_points[np.flatnonzero(bad)[0]]
        raise SingularDesignError(f"too few distinct times near t={where:.4g}")
    return fit


def estimate_mean(sample: SourceSample, grid: Grid, bandwidth: float) -> GridFunction:
    """Pooled local-linear estimate of the mean function on ``grid``."""
    times, values, _ = sample.pooled()
    if times.size < 2:
        raise ValueError("need at least 2 pooled observations")
    return GridFunction(grid, local_linear_1d(times, values, grid.points, bandwidth))


# ---------------------------------------------------------------------------
# covariance surface


def raw_covariance_points(sample: SourceSample, mean: GridFunction) -> RawCovariance:
    """Off-diagonal products of centred observations within each subject."""
    s_parts, t_parts, c_parts, owner = [], [], [], []
    for i, subj in enumerate(sample.subjects):
        k = len(subj)
        if k < 2:
            continue
        r = subj.values - mean(subj.times)
        j, l = np.nonzero(~np.eye(k, dtype=bool))
        s_parts.append(subj.times[j])
        t_parts.append(subj.times[l])
        c_parts.append(r[j] * r[l])
        owner.append(np.full(j.size, i))
    ids = tuple(s.subject_id for s in sample.subjects)
    if not s_parts:
        empty = np.zeros(0)
        return RawCovariance(empty, empty, empty, np.zeros(0, dtype=int), ids)
    return RawCovariance(
        np.concatenate(s_parts),
        np.concatenate(t_parts),
        np.concatenate(c_parts),
        np.concatenate(owner),
        ids,
    )


class _Stats2D:
    """Per-cell sums on a square lattice for a 2-D local-linear fit."""

    fields = ("n", "ds", "dt", "dss", "dtt", "dst", "c0", "cs", "ct", "cc")

    def __init__(self, arrays, n_bins):
        self.arrays = arrays
        self.n_bins = n_bins
        self.centres = _centres(n_bins)

    @classmethod
    def build(cls, s, t, c, n_bins, groups=None, n_groups=1):
        u = _centres(n_bins)
        bs, bt = _bin_index(s, n_bins), _bin_index(t, n_bins)
        ds, dt = s - u[bs], t - u[bt]
        cell = bs * n_bins + bt
        size = n_bins * n_bins
        if groups is not None:
            cell = groups * size + cell
        total = size * n_groups
        cols = (np.ones_like(s), ds, dt, ds * ds, dt * dt, ds * dt, c, c * ds, c * dt, c * c)
        arrays = {
            name: np.bincount(cell, weights=col, minlength=total).reshape(n_groups, n_bins, n_bins)
            for name, col in zip(cls.fields, cols)
        }
        if groups is None:
            return cls({k: v[0] for k, v in arrays.items()}, n_bins)
        return [cls({k: v[g] for k, v in arrays.items()}, n_bins) for g in range(n_groups)]

    def minus(self, other):
        return _Stats2D({k: self.arrays[k] - other.arrays[k] for k in self.fields}, self.n_bins)

    def plane(self, x, y, h):
        """Local plane ``(intercept, slope_s, slope_t)`` at every pair in ``x x y``.

        Slopes are in units of ``1/h``. Returns the coefficients with shape
        ``(len(x), len(y), 3)`` and a boolean singular mask.
        """
        a = self.arrays
        ks = _kernel_powers(self.centres, x, h)
        kt = _kernel_powers(self.centres, y, h)

        def L(p, name, q):
            return ks[p] @ a[name] @ kt[q].T

        s00 = L(0, "n", 0)
        s10 = L(0, "ds", 0) / h + L(1, "n", 0)
        s01 = L(0, "dt", 0) / h + L(0, "n", 1)
        s20 = L(0, "dss", 0) / h**2 + 2 * L(1, "ds", 0) / h + L(2, "n", 0)
        s02 = L(0, "dtt", 0) / h**2 + 2 * L(0, "dt", 1) / h + L(0, "n", 2)
        s11 = L(0, "dst", 0) / h**2 + L(1, "dt", 0) / h + L(0, "ds", 1) / h + L(1, "n", 1)
        t00 = L(0, "c0", 0)
        t10 = L(0, "cs", 0) / h + L(1, "c0", 0)
        t01 = L(0, "ct", 0) / h + L(0, "c0", 1)

        mat = np.stack(
            [
                np.stack([s00, s10, s01], axis=-1),
                np.stack([s10, s20, s11], axis=-1),
                np.stack([s01, s11, s02], axis=-1),
            ],
            axis=-2,
        )
        rhs = np.stack([t00, t10, t01], axis=-1)
        coef = np.full(rhs.shape, np.nan)
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(s00 > 0, s00, 1.0)
            det = np.linalg.det(mat / scale[..., None, None])
        bad = ~(s00 > 0) | ~(det > _DET_TOL)
        ok = ~bad
        if ok.any():
            coef[ok] = np.linalg.solve(mat[ok], rhs[ok][..., None])[..., 0]
        return coef, bad

    def plane_widened(self, x, y, h):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        coef, bad = self.plane(x, y, h)
        width = np.full(bad.shape, float(h))
        for _ in range(MAX_WIDENINGS):
            if not bad.any():
                break
            h = 2 * h
            rows = np.flatnonzero(bad.any(axis=1))
            cols = np.flatnonzero(bad.any(axis=0))
            sub, sub_bad = self.plane(x[rows], y[cols], h)
            block = np.ix_(rows, cols)
            fix = bad[block]
            target = coef[block]
            target[fix] = sub[fix]
            coef[block] = target
            w = width[block]
            w[fix] = h
            width[block] = w
            bad[block] = fix & sub_bad
        return coef, width, bad


def smooth_covariance(points, grid: Grid, bandwidth: float, n_bins=N_BINS_2D) -> DiscretizedOperator:
    """Local-linear surface fit of raw covariances with a product Epanechnikov kernel."""
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    raw = _as_raw(points)
    if len(raw) < 6:
        raise ValueError("need at least 6 raw covariance points")
    stats = _Stats2D.build(raw.s, raw.t, raw.c, n_bins)
    coef, _, bad = stats.plane_widened(grid.points, grid.points, bandwidth)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise SingularDesignError(
            f"singular local design at (s, t) = ({grid.points[i]:.4g}, {grid.points[j]:.4g})"
        )
    k = coef[..., 0]
    return DiscretizedOperator(grid, (k + k.T) / 2)


# ---------------------------------------------------------------------------
# bandwidth selection


def _fold_labels(n_subjects, folds, seed):
    folds = min(int(folds), n_subjects)
    order = np.random.default_rng(seed).permutation(n_subjects)
    labels = np.empty(n_subjects, dtype=int)
    labels[order] = np.arange(n_subjects) % folds
    return labels, folds


def _pick(candidates, scores, total_ss):
    scores = np.asarray(scores, dtype=float)
    if not np.isfinite(scores).any():
        return float(max(candidates))
    best = np.nanmin(np.where(np.isfinite(scores), scores, np.nan))
    tol = 1e-9 * abs(best) + 1e-10 * total_ss + 1e-300
    tied = [h for h, sc in zip(candidates, scores) if np.isfinite(sc) and sc <= best + tol]
    return float(max(tied))


def _cv_scores_2d(raw: RawCovariance, candidates, folds, seed, n_bins):
    n_subjects = int(raw.subject.max()) + 1 if len(raw) else 0
    labels, folds = _fold_labels(max(n_subjects, 1), folds, seed)
    per_fold = _Stats2D.build(raw.s, raw.t, raw.c, n_bins, groups=labels[raw.subject], n_groups=folds)
    total = per_fold[0]
    for st in per_fold[1:]:
        total = _Stats2D({k: total.arrays[k] + st.arrays[k] for k in total.fields}, n_bins)
    u = total.centres
    scores = []
    for h in candidates:
        sse = 0.0
        for test in per_fold:
            occupied = test.arrays["n"] > 0
            if not occupied.any():
                continue
            train = total.minus(test)
            coef, _, bad = train.plane_widened(u, u, h)
            if (bad & occupied).any():
                sse = np.inf
                break
            a0, b1, b2 = coef[..., 0], coef[..., 1], coef[..., 2]
            t = test.arrays
            cell = (
                t["cc"]
                - 2 * a0 * t["c0"]
                - 2 * b1 * t["cs"] / h
                - 2 * b2 * t["ct"] / h
                + a0 * a0 * t["n"]
                + b1 * b1 * t["dss"] / h**2
                + b2 * b2 * t["dtt"] / h**2
                + 2 * a0 * b1 * t["ds"] / h
                + 2 * a0 * b2 * t["dt"] / h
                + 2 * b1 * b2 * t["dst"] / h**2
            )
            sse += float(np.sum(cell[occupied]))
        scores.append(sse)
    return scores, float(np.sum(raw.c**2))


def select_bandwidth(points, candidates=DEFAULT_BANDWIDTHS, folds=10, seed=0, n_bins=N_BINS_CV_2D) -> float:
    """Subject-blocked k-fold cross-validated bandwidth for the covariance smoother.

    Ties (scores equal up to round-off) go to the larger bandwidth.
    """
    candidates = [float(h) for h in candidates]
    if not candidates:
        raise ValueError("no candidate bandwidths")
    if folds < 2:
        raise ValueError("folds must be at least 2")
    if len(candidates) == 1:
        return candidates[0]
    raw = _as_raw(points)
    scores, total_ss = _cv_scores_2d(raw, candidates, folds, seed, n_bins)
    return _pick(candidates, scores, total_ss)


def select_mean_bandwidth(sample: SourceSample, candidates=DEFAULT_BANDWIDTHS, folds=10, seed=0, n_bins=N_BINS_CV_1D) -> float:
    """Subject-blocked k-fold cross-validated bandwidth for the mean smoother."""
    candidates = [float(h) for h in candidates]
    if not candidates:
        raise ValueError("no candidate bandwidths")
    if folds < 2:
        raise ValueError("folds must be at least 2")
    if len(candidates) == 1:
        return candidates[0]
    times, values, owner = sample.pooled()
    labels, folds = _fold_labels(sample.n, folds, seed)
    per_fold = _Stats1D.build(times, values, n_bins, groups=labels[owner], n_groups=folds)
    total = _Stats1D({k: sum(f.arrays[k] for f in per_fold) for k in _Stats1D.fields}, n_bins)
    u = total.centres
    scores = []
    for h in candidates:
        sse = 0.0
        for test in per_fold:
            t = test.arrays
            occupied = t["n"] > 0
            a, b, _, bad = total.minus(test).line_widened(u, h)
            if (bad & occupied).any():
                sse = np.inf
                break
            cell = (
                t["yy"] - 2 * a * t["y0"] - 2 * b * t["y1"] / h
                + a * a * t["n"] + 2 * a * b * t["d1"] / h + b * b * t["d2"] / h**2
            )
            sse += float(np.sum(cell[occupied]))
        scores.append(sse)
    return _pick(candidates, scores, float(np.sum(values**2)))


# ---------------------------------------------------------------------------
# measurement error


def estimate_error_variance(sample: SourceSample, mean: GridFunction, G_hat: DiscretizedOperator, bandwidth: float) -> float:
    """Noise variance from matched diagonal and near-diagonal raw products.

    For two observations of one subject at nearby times ``s, t`` the centred
    residuals ``r`` satisfy ``E[(r_s - r_t)^2 / 2] = sigma^2 + (G(s,s) + G(t,t)) / 2 - G(s,t)``.
    Pairs closer than ``bandwidth / 5`` (capped at 0.02) are averaged and the
    curvature term is removed using ``G_hat``. Pairing within subjects keeps
    the diagonal and off-diagonal parts on identical weights. The result is
    clamped at zero.
    """
    gap = float(np.clip(bandwidth / 5, 0.005, 0.02))
    grid = G_hat.grid
    for _ in range(MAX_WIDENINGS + 1):
        d, s, t = [], [], []
        for subj in sample.subjects:
            if len(subj) < 2:
                continue
            r = subj.values - mean(subj.times)
            j, l = np.triu_indices(len(subj), 1)
            close = np.abs(subj.times[j] - subj.times[l]) <= gap
            j, l = j[close], l[close]
            d.append((r[j] - r[l]) ** 2 / 2)
            s.append(subj.times[j])
            t.append(subj.times[l])
        d = np.concatenate(d) if d else np.zeros(0)
        if d.size >= 10:
            break
        gap *= 2
    if d.size == 0:
        raise SingularDesignError("no within-subject pairs of nearby times")
    s, t = np.concatenate(s), np.concatenate(t)
    interp = RegularGridInterpolator((grid.points, grid.points), G_hat.kernel)
    curvature = (interp(np.c_[s, s]) + interp(np.c_[t, t])) / 2 - interp(np.c_[s, t])
    return max(0.0, float(np.mean(d - curvature)))
