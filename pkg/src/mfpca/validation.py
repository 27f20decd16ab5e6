"""Input checks shared by the estimators and the command line."""

from __future__ import annotations

import numpy as np

from .smoother import SourceSample, SubjectRecord

LONG_COLUMNS = ("source_id", "subject_id", "time", "value")


class DataError(ValueError):
    """Malformed longitudinal input."""


def _columns(X):
    if hasattr(X, "columns"):
        missing = [c for c in LONG_COLUMNS if c not in X.columns]
        if missing:
            raise DataError(f"missing columns: {', '.join(missing)}")
        return [np.asarray(X[c]) for c in LONG_COLUMNS]
    if isinstance(X, dict):
        return [np.asarray(X[c]) for c in LONG_COLUMNS]
    rows = list(X)
    if not rows:
        raise DataError("no observations")
    if any(len(r) != 4 for r in rows):
        raise DataError("each row needs source_id, subject_id, time, value")
    cols = list(zip(*rows))
    return [np.asarray(c, dtype=object) for c in cols]


def check_long_data(X, rescale_time=False, min_sources=1):
    """Group long-format observations into :class:`SourceSample` objects.

    ``X`` may be a DataFrame or dict with columns ``source_id, subject_id, time,
    value``, an iterable of 4-tuples, or an already grouped list of samples.
    Group order follows first appearance.
    """
    if isinstance(X, SourceSample):
        samples = [X]
    elif isinstance(X, (list, tuple)) and X and all(isinstance(x, SourceSample) for x in X):
        samples = list(X)
    else:
        src, subj, t, y = _columns(X)
        if len(t) == 0:
            raise DataError("no observations")
        try:
            t = np.asarray(t, dtype=float)
            y = np.asarray(y, dtype=float)
        except (TypeError, ValueError) as exc:
            raise DataError(f"non-numeric time or value: {exc}") from None
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(y))):
            raise DataError("times and values must be finite")
        if rescale_time:
            lo, hi = t.min(), t.max()
            if hi <= lo:
                raise DataError("cannot rescale: all times are equal")
            t = (t - lo) / (hi - lo)
        elif np.any((t < 0) | (t > 1)):
            bad = int(np.flatnonzero((t < 0) | (t > 1))[0])
            raise DataError(f"time {t[bad]!r} outside [0, 1] (use rescaling to map onto [0, 1])")
        groups: dict = {}
        for i, (s, k) in enumerate(zip(src.tolist(), subj.tolist())):
            groups.setdefault(s, {}).setdefault(k, []).append(i)
        samples = []
        for s, subjects in groups.items():
            records = [SubjectRecord(k, t[idx], y[idx]) for k, idx in subjects.items()]
            if len(records) < 2:
                raise DataError(f"source {s!r} has fewer than 2 subjects")
            samples.append(SourceSample(s, records))
    if len(samples) < min_sources:
        raise DataError(f"need at least {min_sources} sources, got {len(samples)}")
    return samples


def check_curves(X, grid):
    """2-D array of curves evaluated on ``grid`` (one row per curve)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != len(grid):
        raise ValueError(f"curves must have {len(grid)} columns (one per grid point), got {X.shape[1]}")
    return X
