import math
from dataclasses import replace

import numpy as np
import pytest

from mfpca import simulate
from mfpca.core import compose, eigendecompose, op_norm, uniform_grid
from mfpca.integrate import eigengap_d, pooled_projection
from mfpca.simulate import (
    ESTIMATORS,
    NORMS,
    TARGETS,
    EigenfunctionRecipe,
    MetricsTable,
    ScenarioConfig,
    SourceSpec,
    builtin_scenario,
    curves_on_grid,
    example1,
    fourier_basis,
    generate_source,
    oracle_single_source,
    population_operators,
    run_monte_carlo,
    sample_scenario,
    sim3src,
)
from mfpca.spectral import fit_fpca

from conftest import projector

F = EigenfunctionRecipe.single


# ---------------------------------------------------------------------------
# basis and recipes


def test_fourier_constant():
    np.testing.assert_array_equal(fourier_basis(1, np.array([0.0, 0.3, 1.0])), 1.0)


def test_fourier_sine_and_cosine():
    assert fourier_basis(2, 0.25) == pytest.approx(math.sqrt(2))
    assert fourier_basis(3, 0.0) == pytest.approx(math.sqrt(2))
    assert fourier_basis(5, 0.5) == pytest.approx(math.sqrt(2) * math.cos(2 * math.pi))


def test_fourier_rejects_zero_index():
    with pytest.raises(ValueError):
        fourier_basis(0, 0.5)


def test_recipe_must_have_unit_norm():
    with pytest.raises(ValueError):
        EigenfunctionRecipe(((1, 0.5), (2, 0.5)))


def test_spec_rejects_non_orthonormal_recipes():
    with pytest.raises(ValueError):
        SourceSpec((2, 1), (F(2), EigenfunctionRecipe(((2, 0.6), (3, 0.8)))), 0.1, 10, 5, (1,))


def test_spec_rejects_unknown_shared_index():
    with pytest.raises(ValueError):
        SourceSpec((2, 1), (F(2), F(3)), 0.1, 10, 5, (3,))


def test_config_rejects_different_shared_spans():
    a = SourceSpec((2, 1), (F(2), F(3)), 0.1, 10, 5, (1,))
    b = SourceSpec((2, 1), (F(2), F(3)), 0.1, 10, 5, (2,))
    with pytest.raises(ValueError):
        ScenarioConfig((a, b))


def test_builtin_scenarios():
    assert builtin_scenario("sim3src").n == (100, 400, 400)
    assert builtin_scenario("example1", N=10).sources[0].N == 10
    with pytest.raises(KeyError):
        builtin_scenario("missing")


# ---------------------------------------------------------------------------
# generation


def test_generate_zero_process():
    spec = SourceSpec((0.0,), (F(2),), 0.0, 5, 4, (1,))
    sample = generate_source(spec, np.random.default_rng(0))
    assert all(np.all(s.values == 0) for s in sample.subjects)


def test_generate_shapes():
    spec = replace(sim3src().sources[0], n=100, N=25)
    sample = generate_source(spec, np.random.default_rng(1), source_id="s1")
    assert sample.n == 100 and sample.source_id == "s1"
    for s in sample.subjects:
        assert len(s) == 25
        assert np.all((s.times >= 0) & (s.times <= 1))


def test_generate_is_deterministic():
    spec = sim3src().sources[1]
    a = generate_source(spec, np.random.default_rng([3, 1, 1]))
    b = generate_source(spec, np.random.default_rng([3, 1, 1]))
    for x, y in zip(a.subjects, b.subjects):
        np.testing.assert_array_equal(x.values, y.values)


def test_generated_score_variance():
    spec = replace(sim3src().sources[0], n=2000, N=5)
    grid = uniform_grid(501)
    _, scores = generate_source(spec, np.random.default_rng(2), return_scores=True)
    X = curves_on_grid(spec, scores, grid)
    proj = X @ (grid.weights * fourier_basis(1, grid.points))
    assert abs(np.var(proj, ddof=1) - 24) <= 2


def test_sample_scenario_uses_replicate_streams():
    config = sim3src(n=(5, 5, 5), N=3, seed=9)
    first = sample_scenario(config, 2)[1]
    direct = generate_source(config.sources[1], np.random.default_rng([9, 2, 1]), source_id=1)
    np.testing.assert_array_equal(first.subjects[0].values, direct.subjects[0].values)


# ---------------------------------------------------------------------------
# population operators and the oracle


def test_population_shared_projector_sim3src(grid501):
    config = sim3src(grid_size=501)
    ops = population_operators(config)
    x = config.grid.points
    truth = projector(config.grid, fourier_basis(2, x), fourier_basis(3, x))
    assert op_norm(ops["P_s"] - truth) <= 1e-8
    assert round(float(np.trace(ops["P_s"].weighted_matrix()))) == 2


def test_population_eigengap_example1():
    config = example1(grid_size=501)
    ops = population_operators(config)
    assert eigengap_d(list(zip(ops["P_p"], config.n))) == pytest.approx(0.5, abs=1e-4)


@pytest.mark.parametrize("factory", [sim3src, example1])
def test_population_parts_form_projectors(factory):
    config = factory(grid_size=201)
    ops = population_operators(config)
    for P_p in ops["P_p"]:
        P = ops["P_s"] + P_p
        assert op_norm(compose(P, P) - P) <= 1e-10


def test_oracle_source1_population():
    config = sim3src(grid_size=501)
    ops = population_operators(config)
    fit = fit_fpca(ops["G"][0], 3)
    P_s, P_p = oracle_single_source(fit, (2, 3))
    assert op_norm(P_s - ops["P_s"]) <= 1e-8
    assert op_norm(P_p - ops["P_p"][0]) <= 1e-8


def test_oracle_all_indices_shared():
    config = sim3src(grid_size=101)
    fit = fit_fpca(population_operators(config)["G"][0], 3)
    P_s, P_p = oracle_single_source(fit, (1, 2, 3))
    assert op_norm(P_s - fit.projector) <= 1e-10
    assert np.all(P_p.kernel == 0)


def test_oracle_rejects_out_of_range():
    config = sim3src(grid_size=101)
    fit = fit_fpca(population_operators(config)["G"][0], 3)
    with pytest.raises(ValueError):
        oracle_single_source(fit, (2, 4))


# ---------------------------------------------------------------------------
# Monte Carlo harness


def _small():
    return sim3src(n=(30, 40, 40), N=8, seed=5)


def test_table_shape_and_csv():
    table = run_monte_carlo(_small(), 2)
    assert table.errors.shape == (2, len(TARGETS), len(ESTIMATORS), len(NORMS))
    lines = table.to_csv().splitlines()
    assert lines[0].startswith("scenario,n1,n2,n3,N,target,estimator,norm,mean,sd,M,excluded")
    assert len(lines) == 13


def test_single_replicate_is_bit_for_bit_reproducible():
    assert run_monte_carlo(_small(), 1).to_csv() == run_monte_carlo(_small(), 1).to_csv()


def test_parallel_matches_serial():
    serial = run_monte_carlo(_small(), 3, jobs=1)
    parallel = run_monte_carlo(_small(), 3, jobs=2)
    assert serial.to_csv() == parallel.to_csv()
    np.testing.assert_array_equal(serial.errors, parallel.errors)


def test_failed_replicates_are_excluded(monkeypatch):
    real = simulate.run_replicate

    def flaky(config, r, **kw):
        if r in fail:
            raise ValueError("boom")
        return real(config, r, **kw)

    monkeypatch.setattr(simulate, "run_replicate", flaky)
    fail = {0}
    table = run_monte_carlo(sim3src(n=(20, 20, 20), N=6, seed=1), 20, bandwidth=0.2)
    assert table.excluded == 1 and len(table.errors) == 19
    fail = {0, 1}
    with pytest.raises(RuntimeError, match="2 of 20"):
        run_monte_carlo(sim3src(n=(20, 20, 20), N=6, seed=1), 20, bandwidth=0.2)


def test_noiseless_dense_limit():
    """Noise-free, n=1000 per source, N=60, M=5: Multi-FPCA errors all at most 0.05."""
    config = sim3src(n=(1000, 1000, 1000), N=60, seed=0)
    config = replace(config, sources=tuple(replace(s, sigma2=0.0) for s in config.sources))
    table = run_monte_carlo(config, 5)
    for target in TARGETS:
        for norm in NORMS:
            assert table.mean(target, "multi", norm) <= 0.05, (target, norm)


def test_metrics_table_summary():
    errors = np.zeros((2, 3, 2, 2))
    errors[:, 0, 0, 0] = [0.1, 0.3]
    table = MetricsTable("x", (1, 2), 5, 2, errors)
    mean, sd, se = table.summary("shared", "multi", "op")
    assert mean == pytest.approx(0.2)
    assert sd == pytest.approx(math.sqrt(0.02))
    assert se == pytest.approx(sd / math.sqrt(2))
    assert table.to_csv().splitlines()[1].split(",")[1:5] == ["1", "2", "", "5"]


# ---------------------------------------------------------------------------
# invariants over the Monte Carlo study


@pytest.mark.parametrize("name", ["table_50_200_200_sparse", "table_50_200_200_dense", "table_100_400_400"])
def test_multi_beats_single_source_oracle(request, name):
    table = request.getfixturevalue(name)
    for norm in NORMS:
        assert table.mean("shared", "multi", norm) < table.mean("shared", "oracle1", norm)


def test_errors_do_not_grow_with_sample_size(table_50_200_200_dense, table_100_400_400):
    for target in TARGETS:
        for norm in NORMS:
            small = table_50_200_200_dense.summary(target, "multi", norm)
            large = table_100_400_400.summary(target, "multi", norm)
            pooled_sd = math.sqrt((small[1] ** 2 + large[1] ** 2) / 2)
            assert large[0] <= small[0] + pooled_sd, (target, norm)


def test_scree_tracks_population_sim3src(table_100_400_400):
    # sources 2 and 3 carry non-orthogonal specific parts, so the third value
    # sits near 0.874 rather than far below the shared pair
    config = sim3src(n=(100, 400, 400))
    ops = population_operators(config)
    truth = eigendecompose(pooled_projection(list(zip(ops["P"], config.n))), 4).eigenvalues
    scree = np.array(table_100_400_400.scree)[:, :4]
    close = np.all(np.abs(scree - truth) <= 0.05, axis=1)
    assert np.mean(close) >= 0.95
    assert np.mean(scree[:, 1] - scree[:, 2] >= 0.1) >= 0.95


def test_subspace_errors_ignore_eigenfunction_signs():
    config = sim3src(grid_size=101)
    fit = fit_fpca(population_operators(config)["G"][0], 3)
    flipped = replace(
        fit,
        eigensystem=replace(fit.eigensystem, eigenfunctions=-fit.eigensystem.eigenfunctions),
    )
    a = oracle_single_source(fit, (2, 3))[0]
    b = oracle_single_source(flipped, (2, 3))[0]
    np.testing.assert_allclose(a.kernel, b.kernel, atol=1e-14)
