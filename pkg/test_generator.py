from dataclasses import replace

import numpy as np
import pytest
from scipy import integrate, stats
from scipy.special import expit

import generator
from chain_config import ChainConfig, ModelSpecEntry
from chain_fit import entry_linear_predictor, fit_chain
from conftest import mini_arrays, mini_schema
from errors import ConfigError, PackFormatError
from generator import (
    RngContract,
    calibrate_marginal,
    draw_parameters,
    expand_seed,
    expected_prevalence,
    sample_chain,
    splitmix64,
    synthetic_schema,
)
from model_pack import SeedStrataTable, SeedStratum, serialize
from schema_core import PopulationTable


def test_splitmix64_reference_value():
    assert int(splitmix64(np.uint64(0))) == 0xE220A8397B1DCDAF


def test_uniforms_depend_only_on_coordinates():
    rng = RngContract(42)
    everything = rng.uniforms(np.arange(10), entry=3)
    assert np.array_equal(rng.uniforms(np.array([7, 2]), entry=3), everything[[7, 2]])
    assert not np.array_equal(rng.uniforms(np.arange(10), entry=4), everything)
    assert not np.array_equal(RngContract(43).uniforms(np.arange(10), entry=3), everything)
    assert np.all((everything > 0.0) & (everything < 1.0))


def test_normals_are_standard():
    z = RngContract(7).normals(np.arange(1_000_000), entry=0)
    assert abs(z.mean()) < 0.005
    assert z.std() == pytest.approx(1.0, abs=0.005)
    assert abs(stats.skew(z)) < 0.05
    assert abs(stats.kurtosis(z)) < 0.05


def test_expand_seed_conserves_counts_and_drops_out_of_range_ages():
    schema = mini_schema()
    strata = SeedStrataTable((
        SeedStratum(30, 30, ("male", "R01", "1"), 12),
        SeedStratum(31, 33, ("female", "R02", "2"), 11),
        SeedStratum(106, 106, ("male", "R02", "1"), 10),
    ), schema.seed_names, 10, "merge_adjacent_age")
    seeds = expand_seed(strata, schema)
    assert seeds.n == 23
    merged = seeds.values("age")[seeds.values("gender") == 1]
    assert sorted(np.unique(merged).tolist()) == [31.0, 32.0, 33.0]
    assert seeds.missing("bmi").all()


def test_generated_population_respects_schema(fitted_pack):
    seeds = expand_seed(fitted_pack.seed_strata, fitted_pack.schema)
    table = sample_chain(fitted_pack, seeds, RngContract(5))
    assert table.n == 3000
    for name in ("age", "gender", "region", "urbanity"):
        assert np.array_equal(table.values(name), seeds.values(name))
    income = table.values("income_pct")
    assert np.all((income >= 1) & (income <= 100) & (income == np.rint(income)))
    assert np.all((table.values("chd") >= 0) & (table.values("chd") <= 1))
    assert not table.missing("smoking").any()


def test_generation_is_thread_independent(fitted_pack, monkeypatch):
    seeds = expand_seed(fitted_pack.seed_strata, fitted_pack.schema)
    single = sample_chain(fitted_pack, seeds, RngContract(5), threads=1)
    monkeypatch.setattr(generator, "BLOCK_SIZE", 257)
    blocked = sample_chain(fitted_pack, seeds, RngContract(5), threads=8)
    for name in single.schema.names:
        assert np.array_equal(single.values(name), blocked.values(name), equal_nan=True)


def test_disease_presence_columns(fitted_pack):
    seeds = expand_seed(fitted_pack.seed_strata, fitted_pack.schema)
    table = sample_chain(fitted_pack, seeds, RngContract(5), disease_presence=True)
    assert "chd_present" in synthetic_schema(fitted_pack, True)
    assert set(table.labels("chd_present").tolist()) <= {"no", "yes"}


def test_parameter_draws_are_reproducible(fitted_pack):
    a, report = draw_parameters(fitted_pack, 0, seed=3)
    b, _ = draw_parameters(fitted_pack, 0, seed=3)
    c, _ = draw_parameters(fitted_pack, 1, seed=3)
    assert serialize(a) == serialize(b)
    assert serialize(a) != serialize(c)
    assert report.equations > 0


def test_parameter_draw_repairs_indefinite_covariance(fitted_pack):
    fitted = fitted_pack.entries[0]
    equation = fitted.strata[0]
    k = equation.n_params
    cov = np.eye(k)
    cov[0, 0] = -1e-3
    pack = fitted_pack.with_entry(replace(fitted, strata=(replace(equation, covariance=cov),) + fitted.strata[1:]))
    _, report = draw_parameters(pack, 0, seed=3)
    repaired = [r for r in report.repaired if r["entry"] == "income_pct"]
    assert any(r["min_eigenvalue"] == pytest.approx(-1e-3) for r in repaired)


def test_parameter_draw_needs_covariances(fitted_pack):
    fitted = fitted_pack.entries[0]
    stripped = replace(fitted, strata=tuple(replace(eq, covariance=None) for eq in fitted.strata))
    with pytest.raises(PackFormatError, match="covariance"):
        draw_parameters(fitted_pack.with_entry(stripped), 0, seed=3)


def test_logit_normal_prevalence_matches_quadrature():
    eta, sigma = np.array([-2.0, 0.5]), np.array([1.0, 0.3])
    expected = np.mean([
        integrate.quad(lambda z: expit(e + s * z) * stats.norm.pdf(z), -12, 12, epsabs=1e-13)[0]
        for e, s in zip(eta, sigma)
    ])
    assert expected_prevalence("logit_linear", eta, sigma) == pytest.approx(expected, abs=1e-8)
    assert expected_prevalence("logit_linear", np.zeros(3), np.ones(3)) == pytest.approx(0.5, abs=1e-12)


@pytest.fixture(scope="module")
def intercept_pack():
    arrays = mini_arrays(1000, seed=2)
    arrays["smoking"] = np.zeros(1000, dtype=np.int64)
    arrays["smoking"][:100] = 1
    table = PopulationTable.from_arrays(mini_schema(), arrays)
    chain = ChainConfig(entries=(
        ModelSpecEntry("smoking", "logistic", predictors=()),
        ModelSpecEntry("bmi", "linear"),
    ))
    return fit_chain(table, chain)


def test_calibration_odds_multiplier_fixture(intercept_pack):
    seeds = expand_seed(intercept_pack.seed_strata, intercept_pack.schema)
    adjustment, calibrated = calibrate_marginal(intercept_pack, "smoking", 0.14, seeds, RngContract(1))
    assert adjustment.before == pytest.approx(0.10, abs=1e-8)
    assert adjustment.multiplier == pytest.approx((0.14 / 0.86) / (0.10 / 0.90), abs=1e-6)
    assert abs(adjustment.achieved - 0.14) < 1e-4
    assert calibrated.entry("smoking").calibration["multiplier"] == pytest.approx(adjustment.multiplier)
    assert intercept_pack.entry("smoking").calibration is None


def test_repeated_calibration_accumulates_multiplier(intercept_pack):
    seeds = expand_seed(intercept_pack.seed_strata, intercept_pack.schema)
    first, pack = calibrate_marginal(intercept_pack, "smoking", 0.14, seeds, RngContract(1))
    second, pack = calibrate_marginal(pack, "smoking", 0.05, seeds, RngContract(1))
    total = pack.entry("smoking").calibration["multiplier"]
    assert total == pytest.approx(first.multiplier * second.multiplier)
    assert total == pytest.approx((0.05 / 0.95) / (0.10 / 0.90), abs=1e-6)


@pytest.mark.parametrize("variable, target", [("bmi", 0.1), ("smoking", 1.2), ("smoking", 0.0)])
def test_calibration_rejects_bad_requests(intercept_pack, variable, target):
    seeds = expand_seed(intercept_pack.seed_strata, intercept_pack.schema)
    with pytest.raises(ConfigError):
        calibrate_marginal(intercept_pack, variable, target, seeds, RngContract(1))


@pytest.mark.slow
def test_linear_residuals_have_normal_shape(fitted_pack):
    scaled = replace(fitted_pack.seed_strata, rows=tuple(
        replace(row, count=row.count * 334) for row in fitted_pack.seed_strata.rows
    ))
    seeds = expand_seed(scaled, fitted_pack.schema)
    assert seeds.n >= 1_000_000
    index = fitted_pack.chain.index_of("bmi")
    table = sample_chain(fitted_pack, seeds, RngContract(11), threads=4, upto=index + 1)
    fitted = fitted_pack.entries[index]
    eta, sigma = entry_linear_predictor(fitted, table)
    inside = (table.values("bmi") > 10) & (table.values("bmi") < 70)
    residuals = ((table.values("bmi") - eta) / sigma)[inside]
    assert abs(stats.skew(residuals)) < 0.05
    assert abs(stats.kurtosis(residuals)) < 0.05
