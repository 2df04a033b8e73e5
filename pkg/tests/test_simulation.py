"""Monte Carlo harness: population generation, aggregation, determinism."""

import csv

import numpy as np
import pytest

from surveymc import simulation as sim
from surveymc.simulation import (
    McCell,
    McSummary,
    SimConfig,
    SimulationError,
    generate_population,
    mc_se_of_bias,
    run_monte_carlo,
    scaled_config,
    summarize_tables,
    validate_config,
    write_results_csv,
)

TINY = SimConfig(
    n_units=60,
    n_items=8,
    n_covariates=2,
    rank=1,
    snr=2.0,
    designs=("srs",),
    informative=False,
    n_list=(20,),
    replicates=6,
    methods=("full", "ipw", "dr_linear", "dr_mc"),
    seed=7,
)


# ------------------------------------------------------------- population


def test_population_low_rank_orthogonal_to_covariates():
    rng = np.random.default_rng(0)
    cfg = SimConfig(n_units=300, n_items=20, n_covariates=4, rank=3, snr=2.0)
    pop = generate_population(cfg, rng)
    lhs = np.abs(pop.X.T @ pop.low_rank).max()
    assert lhs <= 1e-8 * np.abs(pop.low_rank).max() * pop.n_units


def test_population_noise_scale_matches_snr():
    rng = np.random.default_rng(1)
    cfg = SimConfig(n_units=2000, n_items=50, n_covariates=5, rank=3, snr=2.0)
    pop = generate_population(cfg, rng)
    noise = pop.y - pop.signal
    ratio = noise.std() / pop.signal.std()
    assert abs(ratio - 1 / cfg.snr) <= 0.02 / cfg.snr


def test_population_high_snr_limit():
    rng = np.random.default_rng(2)
    cfg = SimConfig(n_units=200, n_items=10, n_covariates=3, rank=2, snr=1e9)
    pop = generate_population(cfg, rng)
    assert np.abs(pop.y - pop.signal).max() <= 1e-6 * pop.signal.std()


def test_population_rank_bound():
    rng = np.random.default_rng(3)
    cfg = SimConfig(n_units=150, n_items=30, n_covariates=3, rank=4, snr=2.0)
    pop = generate_population(cfg, rng)
    s = np.linalg.svd(pop.low_rank, compute_uv=False)
    assert s[cfg.rank:].max() <= 1e-9 * s[0]


def test_population_rank_zero_means_no_low_rank_part():
    rng = np.random.default_rng(4)
    cfg = SimConfig(n_units=80, n_items=6, n_covariates=2, rank=0, snr=2.0)
    pop = generate_population(cfg, rng)
    assert np.all(pop.low_rank == 0.0)
    np.testing.assert_allclose(pop.signal, pop.X @ pop.coef, rtol=1e-12)


def test_population_means_are_column_means():
    rng = np.random.default_rng(5)
    cfg = SimConfig(n_units=90, n_items=7, n_covariates=2, rank=1, snr=2.0)
    pop = generate_population(cfg, rng)
    np.testing.assert_array_equal(pop.means, pop.y.mean(axis=0))


# -------------------------------------------------------------- aggregation


@pytest.fixture(scope="module")
def tiny_summary():
    return run_monte_carlo(TINY, workers=1)


def test_mse_decomposes_into_bias_and_variance(tiny_summary):
    for c in tiny_summary.cells:
        np.testing.assert_allclose(c.mse, c.bias**2 + c.se**2,
                                   rtol=1e-10, atol=1e-12)


def test_single_replicate_gives_zero_se():
    cfg = scaled_config(TINY, replicates=1, methods=("full", "ipw"))
    summary = run_monte_carlo(cfg)
    for c in summary.cells:
        assert np.all(c.se == 0.0)
        np.testing.assert_allclose(c.mse, c.bias**2, rtol=1e-12)


def test_cells_cover_every_study_method_pair(tiny_summary):
    keys = {(c.design, c.n, c.method) for c in tiny_summary.cells}
    expected = {("srs", 20, m) for m in TINY.methods}
    assert keys == expected
    for c in tiny_summary.cells:
        assert c.n_replicates == TINY.replicates
        assert c.n_failed == 0
        assert c.bias.shape == (TINY.n_items,)


def test_cell_lookup_raises_on_unknown(tiny_summary):
    with pytest.raises(KeyError):
        tiny_summary.cell("srs", 20, "hot_deck")


# -------------------------------------------------------------- determinism


def test_same_seed_reproduces_bitwise(tiny_summary):
    again = run_monte_carlo(TINY, workers=1)
    for a, b in zip(tiny_summary.cells, again.cells):
        np.testing.assert_array_equal(a.bias, b.bias)
        np.testing.assert_array_equal(a.se, b.se)
        np.testing.assert_array_equal(a.mse, b.mse)


def test_worker_count_does_not_change_results(tiny_summary):
    parallel = run_monte_carlo(TINY, workers=2)
    for a, b in zip(tiny_summary.cells, parallel.cells):
        assert (a.design, a.n, a.method) == (b.design, b.n, b.method)
        np.testing.assert_array_equal(a.bias, b.bias)
        np.testing.assert_array_equal(a.se, b.se)
        np.testing.assert_array_equal(a.mse, b.mse)


def test_seed_changes_draws(tiny_summary):
    other = run_monte_carlo(scaled_config(TINY, seed=8), workers=1)
    a = tiny_summary.cell("srs", 20, "full")
    b = other.cell("srs", 20, "full")
    assert not np.array_equal(a.bias, b.bias)


# ---------------------------------------------------------------- validation


@pytest.mark.parametrize(
    "overrides, message",
    [
        ({"n_units": 1}, "n_units"),
        ({"n_items": 0}, "n_items"),
        ({"n_covariates": 0}, "n_covariates"),
        ({"rank": -1}, "rank"),
        ({"rank": 999}, "rank"),
        ({"snr": 0.0}, "snr"),
        ({"designs": ("srs", "cluster")}, "designs: unknown design 'cluster'"),
        ({"designs": ()}, "designs"),
        ({"n_list": (0,)}, "sample size 0"),
        ({"n_list": (10_000,)}, "sample size 10000"),
        ({"n_list": ()}, "n must list"),
        ({"replicates": 0}, "replicates"),
        ({"methods": ("ipw", "bogus")}, "methods: unknown method 'bogus'"),
        ({"methods": ()}, "methods"),
        ({"response_rate": 0.0}, "response_rate"),
        ({"response_rate": 1.0}, "response_rate"),
        ({"slope_sd": -0.1}, "slope_sd"),
    ],
)
def test_validate_config_names_offending_field(overrides, message):
    cfg = scaled_config(TINY, **overrides)
    with pytest.raises(ValueError) as err:
        validate_config(cfg)
    assert message in str(err.value)


def test_run_monte_carlo_validates_before_running():
    with pytest.raises(ValueError, match="replicates"):
        run_monte_carlo(scaled_config(TINY, replicates=0))


# ---------------------------------------------------------------- failures


def test_replicate_failures_over_threshold_abort(monkeypatch):
    def boom(*args, **kwargs):
        raise RuntimeError("synthetic replicate failure")

    monkeypatch.setattr(sim, "compute_estimates", boom)
    with pytest.raises(SimulationError, match="synthetic replicate failure"):
        run_monte_carlo(scaled_config(TINY, methods=("full",)))


def test_mc_se_of_bias_uses_successful_replicates():
    cell = McCell(
        design="srs", informative=False, n=20, method="full",
        bias=np.array([0.1]), se=np.array([2.0]), mse=np.array([4.01]),
        n_replicates=100, n_failed=19,
    )
    np.testing.assert_allclose(mc_se_of_bias(cell), [2.0 / 9.0])


# -------------------------------------------------------------------- output


def test_results_csv_round_trip(tiny_summary, tmp_path):
    path = tmp_path / "results.csv"
    write_results_csv(tiny_summary, path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["design", "informative", "n", "method", "item",
                       "bias", "se", "mse"]
    body = rows[1:]
    assert len(body) == len(tiny_summary.cells) * TINY.n_items
    idx = 0
    for c in tiny_summary.cells:
        for j in range(TINY.n_items):
            row = body[idx]
            assert row[0] == c.design
            assert row[1] == "false"
            assert int(row[2]) == c.n
            assert row[3] == c.method
            assert int(row[4]) == j + 1
            assert float(row[5]) == c.bias[j]
            assert float(row[6]) == c.se[j]
            assert float(row[7]) == c.mse[j]
            idx += 1


def test_summarize_tables_contents(tiny_summary):
    table1, table2 = summarize_tables(tiny_summary, n_items=3)
    assert "design=srs (noninformative), n=20" in table1
    assert "item 3" in table1 and "item 4" not in table1
    for m in TINY.methods:
        assert m in table1
        assert m in table2
    assert "mean and spread of per-item MSE" in table2
    # one mean row and one sd row for the single study
    assert sum("mean" in line for line in table2.splitlines()) >= 1
    assert any(line.strip().startswith("srs") for line in table2.splitlines())


def test_summarize_tables_handles_empty_summary():
    empty = McSummary(cells=[], config=TINY)
    table1, table2 = summarize_tables(empty)
    assert table1.strip() == ""
    assert table2.startswith("mean and spread of per-item MSE")


def test_summarize_tables_caps_items_at_available(tiny_summary):
    table1, _ = summarize_tables(tiny_summary, n_items=99)
    assert f"item {TINY.n_items}" in table1
    assert f"item {TINY.n_items + 1}" not in table1


# ---------------------------------------------------------------- utilities


def test_scaled_config_overrides_only_named_fields():
    cfg = scaled_config(TINY, replicates=3, seed=11)
    assert cfg.replicates == 3 and cfg.seed == 11
    assert cfg.n_units == TINY.n_units and cfg.methods == TINY.methods
    assert TINY.replicates == 6  # original untouched
