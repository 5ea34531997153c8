from dataclasses import replace

import numpy as np
import pytest

from chain_config import ChainConfig, ModelSpecEntry, PopulationFilter
from chain_fit import (
    CVReport,
    ImputationSet,
    build_design,
    crossvalidate,
    fit_chain,
    fit_entry,
    hot_deck_impute,
    pool_rubin,
    predict_entry,
)
from conftest import mini_arrays, mini_chain, mini_schema, mini_table
from errors import ConfigError, DisclosureError, ValidationError
from faux_oracle import generate_faux, paperlike_full
from model_pack import serialize
from schema_core import PopulationTable
from spline_glm import ColumnDescriptor


def _table(n=3000, seed=1, **edits):
    arrays = mini_arrays(n, seed)
    for name, edit in edits.items():
        arrays[name] = edit(arrays[name])
    return PopulationTable.from_arrays(mini_schema(), arrays)


def test_rubin_scalar_fixture():
    pooled, total = pool_rubin([2.0, 4.0], [0.5, 0.5])
    assert pooled == pytest.approx(3.0)
    assert total == pytest.approx(3.5)


def test_rubin_matches_explicit_formula():
    rng = np.random.default_rng(4)
    m, k = 5, 3
    estimates = rng.normal(size=(m, k))
    covariances = []
    for _ in range(m):
        a = rng.normal(size=(k, k))
        covariances.append(a @ a.T)
    pooled, total = pool_rubin(estimates, covariances)

    mean = sum(estimates) / m
    within = sum(covariances) / m
    between = sum(np.outer(e - mean, e - mean) for e in estimates) / (m - 1)
    np.testing.assert_allclose(pooled, mean, atol=1e-12)
    np.testing.assert_allclose(total, within + (1 + 1 / m) * between, atol=1e-12)


def test_rubin_needs_two_replicates():
    with pytest.raises(ValidationError):
        pool_rubin([1.0], [1.0])


def _survey_table():
    def smoking(values):
        values = values.copy()
        values[:300] = -1
        return values

    def bmi(values):
        values = values.copy()
        values[:100] = np.nan
        values[300:400] = np.nan
        return values

    return _table(smoking=smoking, bmi=bmi)


def test_hot_deck_completes_participants_only():
    table = _survey_table()
    imputed = hot_deck_impute(table, ["smoking", "bmi"], m=3, seed=9)
    assert imputed.m == 3
    for replicate in imputed.replicates:
        assert replicate.missing("smoking")[:100].all()
        assert not replicate.missing("smoking")[100:].any()
        assert replicate.missing("bmi")[:100].all()
        assert not replicate.missing("bmi")[300:400].any()
        assert np.array_equal(replicate.values("bmi")[400:], table.values("bmi")[400:])


def test_hot_deck_is_deterministic_and_replicates_differ():
    table = _survey_table()
    a = hot_deck_impute(table, ["smoking", "bmi"], m=2, seed=9)
    b = hot_deck_impute(table, ["smoking", "bmi"], m=2, seed=9)
    for x, y in zip(a.replicates, b.replicates):
        assert np.array_equal(x.values("smoking"), y.values("smoking"))
    assert not np.array_equal(a.replicates[0].values("smoking"), a.replicates[1].values("smoking"))


def test_default_scope_imputes_education_in_every_replicate():
    spec = replace(paperlike_full(), n=4000)
    table = generate_faux(spec, 3)
    chain = spec.chain()
    assert "education" in chain.imputation_scope
    filters = {e.dependent: e.population_filter for e in chain.entries if e.population_filter is not None}
    imputed = hot_deck_impute(table, chain.imputation_scope, chain.imputation_replicates, chain.imputation_seed,
                              filters)
    hidden = table.missing("education")
    assert hidden.any()
    first = imputed.replicates[0].values("education")
    for replicate in imputed.replicates:
        assert not replicate.missing("education").any()
        assert np.array_equal(replicate.values("education")[~hidden], table.values("education")[~hidden])
        assert (~replicate.missing("smoking")).sum() < 400
    assert any(not np.array_equal(r.values("education")[hidden], first[hidden]) for r in imputed.replicates[1:])


def test_hot_deck_respects_filters():
    table = _survey_table()
    adults = PopulationFilter("age", ">", 18)
    imputed = hot_deck_impute(table, ["smoking", "bmi"], m=2, seed=1, filters={"bmi": adults})
    children = np.flatnonzero(table.values("age") <= 18)
    hidden = children[table.missing("bmi")[children]]
    assert imputed.replicates[0].missing("bmi")[hidden].all()


def test_imputation_set_rejects_changed_observed_cells():
    table = mini_table(200)
    changed = table.with_columns({"bmi": table.values("bmi") - 0.5})
    with pytest.raises(ValidationError, match="changes an observed source value"):
        ImputationSet((table, changed), table)


def test_fit_chain_builds_one_entry_per_model(fitted_pack):
    assert [e.dependent for e in fitted_pack.entries] == ["income_pct", "smoking", "bmi", "chd"]
    income = fitted_pack.entry("income_pct")
    assert income.response_zscore is not None
    assert [e.stratum for e in income.strata] == [(("gender", "female"),), (("gender", "male"),)]
    for fitted in fitted_pack.entries:
        for equation in fitted.strata:
            if not equation.fallback:
                assert equation.n >= 10
                assert equation.descriptors[0] == ColumnDescriptor("intercept")


def test_fit_chain_is_thread_independent(fitted_pack):
    assert serialize(fit_chain(mini_table(), mini_chain(), threads=4)) == serialize(fitted_pack)


def test_each_entry_sees_only_earlier_variables(fitted_pack):
    chain = fitted_pack.chain
    for index, entry in enumerate(fitted_pack.entries):
        assert entry.dependent == chain.dependents[index]
        earlier = set(chain.available_before(index))
        for equation in entry.equations():
            columns = tuple(equation.descriptors) + tuple(equation.dropped)
            used = {d.variable for d in columns if d.kind != "intercept"}
            assert used <= earlier
            assert set(entry.stratifiers) <= earlier
    chd = fitted_pack.entry("chd").equations()[0]
    assert {"age", "income_pct", "smoking", "bmi"} <= {d.variable for d in chd.descriptors}
    first = fitted_pack.entries[0].equations()[0]
    assert {d.variable for d in first.descriptors if d.kind != "intercept"} <= set(chain.seed_names)


@pytest.mark.parametrize("entries, message", [
    ((ModelSpecEntry("chd", "logit_linear", predictors=("age", "bmi")), ModelSpecEntry("bmi", "linear")),
     "predictor 'bmi' is not a seed variable or modeled earlier"),
    ((ModelSpecEntry("bmi", "linear", stratifiers=("smoking",)), ModelSpecEntry("smoking", "logistic")),
     "stratifier 'smoking' is not a seed variable or modeled earlier"),
])
def test_chain_out_of_order_is_rejected(entries, message):
    with pytest.raises(ConfigError, match=message):
        mini_chain(entries=entries).validate(mini_schema())


def test_small_stratum_falls_back_to_pooled():
    def region(values):
        values = np.zeros_like(values)
        values[:5] = 1
        return values

    table = _table(region=region)
    chain = ChainConfig(entries=(ModelSpecEntry("bmi", "linear", stratifiers=("region",)),))
    fitted = fit_entry(table, chain, 0)
    small = [eq for eq in fitted.strata if eq.stratum == (("region", "R02"),)][0]
    assert small.fallback
    assert small.coefficients is None
    assert small.fallback_reason in ("small_stratum", "below_min_count")
    assert fitted.pooled is not None
    assert fitted.equation_for((("region", "R02"),)) is fitted.pooled
    assert ColumnDescriptor("dummy", "region", "R02") in fitted.pooled.descriptors


def test_tiny_source_is_a_disclosure_error():
    with pytest.raises(DisclosureError):
        fit_chain(mini_table(5), mini_chain())


def test_imputed_entries_pool_replicates():
    table = _survey_table()
    chain = mini_chain(
        entries=(
            ModelSpecEntry("income_pct", "linear", stratifiers=("gender",)),
            ModelSpecEntry("smoking", "logistic", stratifiers=("gender",), missing_policy="imputed_replicates"),
            ModelSpecEntry("bmi", "linear", stratifiers=("gender",), missing_policy="imputed_replicates"),
        ),
        imputation_scope=("smoking", "bmi"),
    )
    pack = fit_chain(table, chain)
    assert all(eq.replicates == 5 for eq in pack.entry("smoking").strata)
    assert all(eq.replicates == 1 for eq in pack.entry("income_pct").strata)


def test_missing_indicator_policy_adds_indicator_column():
    table = _survey_table()
    chain = mini_chain(entries=(
        ModelSpecEntry("income_pct", "linear"),
        ModelSpecEntry("smoking", "logistic"),
        ModelSpecEntry("bmi", "linear", missing_policy="missing_indicator"),
    ))
    bundle = build_design(table, chain, "bmi")
    assert ColumnDescriptor("missing_indicator", "smoking") in bundle.design.descriptors
    assert bundle.rows.size == int((~table.missing("bmi")).sum())


def test_complete_case_drops_rows_with_missing_predictors():
    table = _survey_table()
    chain = mini_chain(entries=(
        ModelSpecEntry("income_pct", "linear"),
        ModelSpecEntry("smoking", "logistic"),
        ModelSpecEntry("bmi", "linear"),
    ))
    bundle = build_design(table, chain, "bmi")
    assert bundle.rows.min() >= 300


def _line_chain():
    return ChainConfig(entries=(ModelSpecEntry("bmi", "linear", predictors=("age",)),))


def test_noiseless_fit_predicts_exactly():
    table = _table(bmi=lambda _: 20.0 + 0.1 * mini_arrays(3000)["age"])
    fitted = fit_entry(table, _line_chain(), 0)
    np.testing.assert_allclose(predict_entry(fitted, table), table.values("bmi"), atol=1e-8)
    assert fitted.strata[0].sigma == pytest.approx(0.0, abs=1e-8)


def test_crossvalidation_folds_partition_rows():
    report = crossvalidate(mini_table(), mini_chain(), "bmi", folds=7)
    assert sum(report.fold_sizes) == 3000
    assert max(report.fold_sizes) - min(report.fold_sizes) <= 1
    assert len(report.fold_scores) == 7
    assert report.metric == "rmse"


def test_crossvalidation_noiseless_rmse_is_zero():
    table = _table(bmi=lambda _: 20.0 + 0.1 * mini_arrays(3000)["age"])
    report = crossvalidate(table, _line_chain(), "bmi", folds=10)
    assert report.mean == pytest.approx(0.0, abs=1e-8)


def test_crossvalidation_known_sigma():
    rng = np.random.default_rng(77)
    table = _table(n=10_000, bmi=lambda _: 25.0 + rng.normal(0.0, 2.0, 10_000))
    report = crossvalidate(table, _line_chain(), "bmi", folds=10)
    assert report.mean == pytest.approx(2.0, rel=0.1)
    assert 0.0 < report.sd < 0.5


def test_crossvalidation_report_mean_and_sd():
    report = CVReport("bmi", "rmse", 4, fold_scores=[1.0, 2.0, 3.0, 4.0], fold_sizes=[10, 10, 10, 10])
    assert report.mean == pytest.approx(2.5)
    assert report.sd == pytest.approx(np.sqrt(5.0 / 3.0))
    record = report.to_dict()
    assert record["sd"] == pytest.approx(np.sqrt(5.0 / 3.0))
    assert CVReport("bmi", "rmse", 2, fold_scores=[1.0], fold_sizes=[5]).to_dict()["sd"] is None


def test_crossvalidation_of_categorical_reports_log_loss():
    report = crossvalidate(mini_table(), mini_chain(), "smoking", folds=5)
    assert report.metric == "log_loss"
    assert 0.0 < report.mean < np.log(2.0)


def test_crossvalidation_needs_two_folds():
    with pytest.raises(ConfigError):
        crossvalidate(mini_table(), mini_chain(), "bmi", folds=1)
