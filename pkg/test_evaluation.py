import json

import numpy as np
import pandas as pd
import pytest

from conftest import mini_arrays, mini_schema, mini_table
from errors import SchemaError, ValidationError
from evaluation import check_comparable, emit_report, frequency_table, moments, stratified_compare
from schema_core import PopulationSchema, PopulationTable


def test_moments_of_uniform_percentiles():
    summary = moments(np.arange(1, 101))
    assert summary.n == 100
    assert summary.mean == pytest.approx(50.5)
    assert summary.sd == pytest.approx(29.011492, abs=1e-6)
    assert summary.skewness == pytest.approx(0.0, abs=1e-12)
    assert summary.kurtosis == pytest.approx(-6 * 10001 / (5 * 9999), abs=1e-9)


def test_moments_of_constant_column_have_no_shape():
    summary = moments(np.full(5, 3.0))
    assert summary.sd == 0.0
    assert summary.skewness is None and summary.kurtosis is None


def test_moments_ignore_missing_and_need_two_values():
    assert moments([1.0, np.nan, 3.0]).mean == pytest.approx(2.0)
    with pytest.raises(ValidationError):
        moments([1.0, np.nan])


def test_frequency_table_counts_missing_separately():
    table = frequency_table([0, 1, 1, -1, 1], ["never", "current", "former"])
    assert table.counts == (1, 3, 0)
    assert table.missing == 1
    assert table.percents == pytest.approx((25.0, 75.0, 0.0))


def test_frequency_table_of_all_missing_column():
    with pytest.raises(ValidationError):
        frequency_table([-1, -1], ["never", "current"])


def _smokers(smoking):
    arrays = mini_arrays(4)
    arrays["gender"] = np.array([0, 0, 1, 1])
    arrays["smoking"] = np.asarray(smoking)
    return PopulationTable.from_arrays(mini_schema(), arrays)


def test_stratified_prevalence_fixture():
    comparison = stratified_compare(_smokers([1, 0, 1, 1]), _smokers([0, 0, 0, 0]), "smoking", ["gender"],
                                    level="current")
    assert comparison.differences() == {
        ("smoking=current", "gender=female"): pytest.approx(-1.0),
        ("smoking=current", "gender=male"): pytest.approx(-0.5),
    }
    assert comparison.max_abs_difference == pytest.approx(1.0)
    male = [r for r in comparison.rows if r.population == "source" and r.stratum_key == "gender=male"][0]
    assert male.n == 2
    assert male.ci_low == pytest.approx(0.5 - 1.96 * np.sqrt(0.125))


def test_stratified_compare_of_population_with_itself(table):
    comparison = stratified_compare(table, table, "bmi", ["age", "gender"])
    assert comparison.max_abs_difference == 0.0
    keys = {r.stratum_key for r in comparison.rows}
    assert "age_class=3|gender=male" in keys
    assert all(r.ci_low <= r.estimate <= r.ci_high for r in comparison.rows if r.n >= 2)


def test_stratified_compare_covers_every_level(table):
    comparison = stratified_compare(table, table, "smoking", ["gender"])
    assert {r.target for r in comparison.rows} == {"smoking=never", "smoking=current"}


def test_stratified_compare_rejects_continuous_stratifier(table):
    with pytest.raises(SchemaError):
        stratified_compare(table, table, "smoking", ["bmi"])


def test_check_comparable_needs_every_source_variable(table):
    schema = mini_schema()
    reduced = PopulationSchema(schema.variables[:-1])
    arrays = mini_arrays(50)
    del arrays["chd"]
    synthetic = PopulationTable.from_arrays(reduced, arrays)
    with pytest.raises(ValidationError, match="chd"):
        check_comparable(table, synthetic)
    assert check_comparable(synthetic, table) == list(reduced.names)


def test_report_of_population_with_itself(table, tmp_path):
    comparison = stratified_compare(table, table, "smoking", ["age", "gender"])
    report = emit_report(table, table, str(tmp_path), [comparison])
    for name in ("frequencies", "moments", "frequencies_adults", "moments_adults", "plot_data", "summary"):
        assert (tmp_path / report.paths[name].split("/")[-1]).exists()
    summary = json.loads((tmp_path / "summary.json").read_text(encoding="utf-8"))
    assert summary["max_abs_frequency_difference_pp"] == 0.0
    assert summary["max_relative_mean_difference"] == 0.0
    assert summary["stratified_max_abs_difference"] == {"smoking by age|gender": 0.0}
    assert summary["n"] == {"source": 3000, "synthetic": 3000}

    frequencies = pd.read_csv(tmp_path / "frequencies.csv")
    assert set(frequencies["variable"]) == {"gender", "region", "urbanity", "smoking"}
    plot = pd.read_csv(tmp_path / "plot_data.csv")
    assert len(plot) == len(comparison.rows)


def test_adult_tables_exclude_children(tmp_path):
    table = mini_table(500)
    emit_report(table, table, str(tmp_path), adult_age=18)
    all_ages = pd.read_csv(tmp_path / "moments.csv").set_index("variable")
    adults = pd.read_csv(tmp_path / "moments_adults.csv").set_index("variable")
    expected = int((table.values("age") > 18).sum())
    assert adults.loc["age", "source_n"] == expected
    assert all_ages.loc["age", "source_n"] == 500
