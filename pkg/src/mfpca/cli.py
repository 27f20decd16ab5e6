"""Command line entry point: ``mfpca simulate | fit | scree``.

Every command writes CSV files with a header row plus ``manifest.json``
recording the resolved settings. Outputs depend only on the flags, the input
files and the seed, so repeated runs are byte-identical.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import re
import sys
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy
import sklearn

from . import integrate, smoother
from .core import eigendecompose, uniform_grid
from .estimator import MultiSourceFPCA, fit_source, parse_shared_rule
from .integrate import IllSeparatedError, integrate_sources
from .simulate import SCENARIOS, builtin_scenario, population_operators, run_monte_carlo, sample_scenario
from .smoother import SingularDesignError
from .spectral import RankRule
from .validation import LONG_COLUMNS, DataError, check_long_data

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
SCREE_LENGTH = 20
FLOAT_FORMAT = "{:.12g}"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# flag parsing


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return value


def _int_list(text):
    try:
        values = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}") from None
    if any(v < 1 for v in values):
        raise argparse.ArgumentTypeError("sample sizes must be positive")
    return values


def parse_bandwidth(text):
    """``cv`` or ``fixed:h`` with ``h > 0``."""
    if text == "cv":
        return "cv"
    kind, _, value = text.partition(":")
    try:
        h = float(value)
    except ValueError:
        h = -1.0
    if kind != "fixed" or not h > 0:
        raise UsageError(f"--bandwidth must be 'cv' or 'fixed:h' with h > 0, got {text!r}")
    return h


def parse_components(text, n_sources=None):
    """Per-source rank rule: ``true``, an int (fixed rank) or a float in (0, 1) (FVE).

    A comma separated list gives one rule per source, in order.
    """
    items = text.split(",")
    rules = []
    for item in items:
        item = item.strip()
        if item == "true":
            rules.append("true")
            continue
        try:
            value = int(item)
        except ValueError:
            try:
                value = float(item)
            except ValueError:
                raise UsageError(f"cannot interpret component rule {item!r}") from None
        try:
            RankRule.parse(value)
        except ValueError as exc:
            raise UsageError(f"--components: {exc}") from None
        rules.append(value)
    if len(rules) > 1 and n_sources is not None and len(rules) != n_sources:
        raise UsageError(f"--components lists {len(rules)} rules for {n_sources} sources")
    return rules


def resolve_shared_rule(ms, rank_rule):
    """Combine ``--ms`` and ``--rank-rule`` into one shared-rank rule."""
    if ms == "equal-rank":
        return "equal-rank"
    try:
        if ms != "auto":
            if not ms.startswith("fixed:"):
                raise ValueError
            return parse_shared_rule(ms)
        return parse_shared_rule(rank_rule)
    except ValueError:
        raise UsageError(f"cannot interpret shared rank settings --ms {ms!r} --rank-rule {rank_rule!r}") from None


def _seed(args):
    env = os.environ.get("MFPCA_SEED")
    if env is None or env == "":
        return args.seed
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"MFPCA_SEED must be an integer, got {env!r}") from None


# ---------------------------------------------------------------------------
# file I/O


def read_long_csv(path):
    """Read a long-format CSV with columns ``source_id, subject_id, time, value``.

    Returns a dict of columns. Rows that fail to parse are collected and
    reported together with their line numbers.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    reader = csv.reader(text.splitlines())
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError(f"{path}: empty file") from None
    missing = [c for c in LONG_COLUMNS if c not in header]
    if missing:
        raise DataError(f"{path}: header lacks column(s) {', '.join(missing)}")
    pos = [header.index(c) for c in LONG_COLUMNS]
    cols = {c: [] for c in LONG_COLUMNS}
    bad = []
    for line, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        try:
            src, subj, t, y = (row[i].strip() for i in pos)
            t, y = float(t), float(y)
            if not (np.isfinite(t) and np.isfinite(y)) or not src or not subj:
                raise ValueError
        except (IndexError, ValueError):
            bad.append(line)
            continue
        cols["source_id"].append(src)
        cols["subject_id"].append(subj)
        cols["time"].append(t)
        cols["value"].append(y)
    if bad:
        shown = ", ".join(map(str, bad[:20])) + (" ..." if len(bad) > 20 else "")
        raise DataError(f"{path}: {len(bad)} unparseable row(s) at line(s) {shown}")
    if not cols["time"]:
        raise DataError(f"{path}: no data rows")
    return cols


def write_long_csv(path, samples):
    """Write samples in the long format read by :func:`read_long_csv`."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LONG_COLUMNS)
        for sample in samples:
            for subj in sample.subjects:
                for t, y in zip(subj.times, subj.values):
                    w.writerow([sample.source_id, subj.subject_id, repr(float(t)), repr(float(y))])


def _fmt(x):
    return FLOAT_FORMAT.format(float(x))


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def _write_functions(path, grid, functions, prefix):
    functions = np.atleast_2d(functions)
    header = ["t"] + [f"{prefix}{i + 1}" for i in range(len(functions))]
    _write_rows(path, header, ([t, *col] for t, col in zip(grid.points, functions.T)))


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, (tuple, np.ndarray)):
        return list(obj)
    raise TypeError(f"not serialisable: {type(obj).__name__}")


def _safe_name(source_id):
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", str(source_id)) or "source"


def _manifest(args, command, seed, outputs, extra=None):
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    settings = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")}
    settings["seed"] = seed
    manifest = {
        "command": command,
        "settings": settings,
        "defaults": {
            "bandwidth_candidates": list(smoother.DEFAULT_BANDWIDTHS),
            "cv_folds": 10,
            "smoother_bins_1d": smoother.N_BINS_1D,
            "smoother_bins_2d": smoother.N_BINS_2D,
            "cv_bins_1d": smoother.N_BINS_CV_1D,
            "cv_bins_2d": smoother.N_BINS_CV_2D,
            "max_bandwidth_doublings": smoother.MAX_WIDENINGS,
            "gap_floor": integrate.GAP_FLOOR,
            "threshold_default": integrate.DEFAULT_THRESHOLD,
            "kernel": "epanechnikov",
            "quadrature": "trapezoid",
        },
        "versions": {
            "artifact": version,
            "python": ".".join(map(str, sys.version_info[:3])),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "scikit-learn": sklearn.__version__,
        },
        "outputs": sorted(outputs),
    }
    if extra:
        manifest.update(extra)
    return manifest


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _scenario(args, seed):
    if args.scenario not in SCENARIOS:
        raise UsageError(f"unknown scenario {args.scenario!r}; choose from {', '.join(SCENARIOS)}")
    n = getattr(args, "n", None)
    if n is not None:
        expected = len(builtin_scenario(args.scenario).sources)
        if len(n) != expected:
            raise UsageError(f"--n needs {expected} sample sizes for scenario {args.scenario}")
    return builtin_scenario(args.scenario, n=n, N=getattr(args, "N", None), grid_size=args.grid_size, seed=seed)


def _load_samples(args):
    cols = read_long_csv(args.data)
    return check_long_data(cols, rescale_time=args.rescale_time)


def _fit_all(samples, grid, args, seed):
    rules = parse_components(args.components, len(samples))
    if "true" in rules:
        raise UsageError("--components true is only available for simulated scenarios")
    bandwidth = parse_bandwidth(args.bandwidth)
    fits = []
    for k, sample in enumerate(samples):
        rule = rules[k] if len(rules) > 1 else rules[0]
        fits.append(fit_source(sample, grid, rule, bandwidth, seed=seed))
    return fits


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args):
    seed = _seed(args)
    config = _scenario(args, seed)
    rules = parse_components(args.components, len(config.sources))
    if len(rules) > 1:
        raise UsageError("simulate takes a single --components rule")
    shared_rule = resolve_shared_rule(args.ms, args.rank_rule)
    table = run_monte_carlo(
        config,
        args.M,
        rank_rule=rules[0],
        bandwidth=parse_bandwidth(args.bandwidth),
        shared_rule=shared_rule,
        jobs=args.jobs,
    )
    out = _out_dir(args)
    outputs = ["metrics.csv"]
    with open(out / "metrics.csv", "w", newline="") as fh:
        table.to_csv(fh)
    if args.emit_scree:
        rows = [
            [r, i + 1, float(v)]
            for r, spectrum in enumerate(table.scree)
            for i, v in enumerate(spectrum)
        ]
        _write_rows(out / "scree.csv", ["replicate", "index", "eigenvalue"], rows)
        outputs.append("scree.csv")
    if args.export_data:
        write_long_csv(out / "data.csv", sample_scenario(config, 0))
        outputs.append("data.csv")
    extra = {
        "excluded": table.excluded,
        "failures": [{"replicate": r, "error": msg} for r, msg in table.failures],
        "shared_ranks": table.shared_ranks,
    }
    _write_json(out / "manifest.json", _manifest(args, "simulate", seed, outputs + ["manifest.json"], extra))
    print(f"wrote {', '.join(outputs)} to {out}")
    return EXIT_OK


def cmd_fit(args):
    seed = _seed(args)
    samples = _load_samples(args)
    grid = uniform_grid(args.grid_size)
    fits = _fit_all(samples, grid, args, seed)
    model = MultiSourceFPCA(shared_rank=resolve_shared_rule(args.ms, args.rank_rule))
    model.fit_sources(fits)

    out = _out_dir(args)
    outputs = []
    sources = []
    for fit in fits:
        name = _safe_name(fit.source_id)
        eig = fit.eigensystem.eigenvalues
        _write_rows(
            out / f"source_{name}_eigenvalues.csv",
            ["index", "eigenvalue", "retained"],
            ([i + 1, float(v), int(i < fit.m)] for i, v in enumerate(eig)),
        )
        _write_functions(out / f"source_{name}_eigenfunctions.csv", grid, fit.eigenfunctions, "phi")
        outputs += [f"source_{name}_eigenvalues.csv", f"source_{name}_eigenfunctions.csv"]
        specific = model.specific_components(fit.source_id)
        if specific is not None:
            _write_functions(out / f"source_{name}_specific_eigenfunctions.csv", grid, specific, "phi")
            outputs.append(f"source_{name}_specific_eigenfunctions.csv")
        sources.append(
            {
                "source_id": fit.source_id,
                "n": fit.n,
                "m": fit.m,
                "sigma2": fit.sigma2,
                "bandwidths": fit.bandwidths,
            }
        )
    _write_scree(out / "pw_spectrum.csv", model.pw_eigenvalues_)
    _write_functions(out / "shared_eigenfunctions.csv", grid, model.shared_components_, "psi")
    outputs += ["pw_spectrum.csv", "shared_eigenfunctions.csv", "summary.json", "manifest.json"]
    summary = {
        "sources": sources,
        "m_s": model.n_shared_,
        "d_hat": model.eigengap_,
        "pw_eigenvalues": [float(v) for v in model.pw_eigenvalues_[:SCREE_LENGTH]],
    }
    _write_json(out / "summary.json", summary)
    _write_json(out / "manifest.json", _manifest(args, "fit", seed, outputs))
    print(f"m_s = {model.n_shared_}; wrote {len(outputs)} files to {out}")
    return EXIT_OK


def _write_scree(path, eigenvalues):
    lam = np.asarray(eigenvalues, dtype=float)[:SCREE_LENGTH]
    _write_rows(path, ["index", "eigenvalue"], ([i + 1, float(v)] for i, v in enumerate(lam)))


def cmd_scree(args):
    seed = _seed(args)
    if (args.data is None) == (args.scenario is None):
        raise UsageError("scree needs exactly one of --data or --scenario")
    if args.population:
        if args.scenario is None:
            raise UsageError("--population requires --scenario")
        config = _scenario(args, seed)
        truth = population_operators(config)
        pw = integrate.pooled_projection(list(zip(truth["P"], config.n)))
        spectrum = eigendecompose(pw, len(config.grid)).eigenvalues
    else:
        if args.scenario is not None:
            config = _scenario(args, seed)
            samples = sample_scenario(config, 0)
            if args.components in (None, "true"):
                args.components = ",".join(str(s.rank) for s in config.sources)
        else:
            samples = _load_samples(args)
            args.components = args.components or "0.95"
        grid = uniform_grid(args.grid_size)
        fits = _fit_all(samples, grid, args, seed)
        spectrum = integrate_sources(fits, "equal-rank", specific=False).P_w_spectrum.eigenvalues
    out = _out_dir(args)
    _write_scree(out / "scree.csv", spectrum)
    _write_json(out / "manifest.json", _manifest(args, "scree", seed, ["scree.csv", "manifest.json"]))
    print(f"wrote scree.csv to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common(p, components_default, components_help=None):
    p.add_argument("--grid-size", type=_positive_int, default=101, help="output grid points on [0, 1] (default 101)")
    p.add_argument("--seed", type=int, default=0, help="master seed; MFPCA_SEED overrides it")
    p.add_argument("--bandwidth", default="cv", help="'cv' or 'fixed:h' (default cv)")
    p.add_argument(
        "--components",
        default=components_default,
        help="per-source rank: an int, an FVE fraction in (0, 1), 'true' for simulated "
        f"scenarios, or a comma list per source (default {components_help or components_default})",
    )
    p.add_argument("--out", default=".", help="output directory (default .)")


def _shared_flags(p):
    p.add_argument("--rank-rule", default="gap", help="shared rank rule under --ms auto: gap, threshold[:tau] or fixed:m")
    p.add_argument("--ms", default="auto", help="auto, fixed:m or equal-rank (default auto)")


def build_parser():
    parser = argparse.ArgumentParser(prog="mfpca", description="Shared and source-specific functional principal subspaces.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Monte Carlo study on a built-in scenario")
    p.add_argument("--scenario", required=True, help=f"one of {', '.join(SCENARIOS)}")
    p.add_argument("--n", type=_int_list, help="comma separated subjects per source")
    p.add_argument("--N", type=_positive_int, help="observations per subject")
    p.add_argument("--M", type=_positive_int, default=100, help="replicates (default 100)")
    p.add_argument("--jobs", type=_positive_int, default=1, help="worker processes (default 1)")
    p.add_argument("--emit-scree", action="store_true", help="also write the averaged-projector spectrum of every replicate")
    p.add_argument("--export-data", action="store_true", help="also write replicate 0 as long-format data.csv")
    _common(p, "true")
    _shared_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="estimate shared and specific subspaces from a CSV")
    p.add_argument("--data", required=True, help="CSV with columns source_id, subject_id, time, value")
    p.add_argument("--rescale-time", action="store_true", help="map the observed time range onto [0, 1]")
    _common(p, "0.95")
    _shared_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("scree", help="spectrum of the averaged projector")
    p.add_argument("--data", help="CSV with columns source_id, subject_id, time, value")
    p.add_argument("--scenario", help=f"one of {', '.join(SCENARIOS)}")
    p.add_argument("--n", type=_int_list, help="comma separated subjects per source")
    p.add_argument("--N", type=_positive_int, help="observations per subject")
    p.add_argument("--population", action="store_true", help="use the scenario's true projectors")
    p.add_argument("--rescale-time", action="store_true", help="map the observed time range onto [0, 1]")
    _common(p, None, "true for scenarios, 0.95 for data")
    p.set_defaults(func=cmd_scree)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mfpca: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"mfpca: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (IllSeparatedError, SingularDesignError, np.linalg.LinAlgError, ArithmeticError, ValueError, RuntimeError) as exc:
        print(f"mfpca: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
