from dataclasses import replace

import numpy as np
import pytest

from errors import ConfigError
from faux_oracle import (
    FauxRule,
    FauxSpec,
    Term,
    faux_spec,
    generate_faux,
    oracle_marginals,
    paperlike_small,
    skewed_bmi,
)


def _income_source_spec(n=200_000):
    chd = FauxRule("chd", "logit_linear", intercept=-3.0, sigma=0.3,
                   terms=(Term("age", 1.0, center=40.0, scale=20.0),))
    return FauxSpec("income-source", n, paperlike_small().rules[:1] + (chd,), n_regions=4, n_urbanity=2)


def test_presets_by_name():
    spec = faux_spec("paperlike-small")
    assert spec.n == 100_000
    assert "income_pct" in spec.schema()
    assert spec.chain().dependents[0] == "income_source"


def test_unknown_preset():
    with pytest.raises(ConfigError, match="Unknown faux preset"):
        faux_spec("no-such-world")


def test_spec_file_round_trip(tmp_path):
    path = tmp_path / "world.json"
    skewed_bmi().save(str(path))
    assert faux_spec(str(path)).to_dict() == skewed_bmi().to_dict()


def test_rules_must_follow_their_sources():
    rules = paperlike_small().rules
    with pytest.raises(ConfigError, match="before it is generated"):
        FauxSpec("backwards", 100, (rules[1], rules[0]))


def test_rule_coefficient_width_is_checked():
    with pytest.raises(ConfigError, match="coefficients need"):
        FauxSpec("narrow", 100, (FauxRule("household_type", "multinomial", intercept=(0.1, 0.2)),))


def test_generation_is_deterministic():
    spec = replace(skewed_bmi(), n=2_000)
    a, b = generate_faux(spec, 5), generate_faux(spec, 5)
    for name in spec.schema().names:
        assert np.array_equal(a.values(name), b.values(name), equal_nan=True)
    c = generate_faux(spec, 6)
    assert not np.array_equal(a.values("income_pct"), c.values("income_pct"))


def test_survey_variables_are_subsampled():
    spec = replace(skewed_bmi(), n=20_000, survey_rate=0.02)
    table = generate_faux(spec, 3)
    for name in table.schema.seed_names:
        assert not table.missing(name).any()
    assert (~table.missing("smoking")).mean() == pytest.approx(0.02, abs=0.003)
    children = table.values("age") <= 18
    assert table.missing("bmi")[children].all()
    assert not table.missing("income_pct").any()

    complete = generate_faux(spec, 3, inject_missing=False)
    assert not complete.missing("smoking").any()
    assert np.array_equal(complete.missing("bmi"), children)


def test_oracle_seed_marginals_are_exact():
    spec = _income_source_spec()
    marginals = oracle_marginals(spec)
    assert marginals["gender"]["frequencies"]["male"] == pytest.approx(0.495, abs=1e-12)
    weights = spec.age_weights()
    assert marginals["age"]["mean"] == pytest.approx(float(np.arange(weights.size) @ weights), abs=1e-9)
    assert marginals["income_source"]["method"] == "exact"
    assert marginals["chd"]["method"] == "quadrature"
    assert sum(marginals["income_source"]["frequencies"].values()) == pytest.approx(1.0)


def test_faux_population_agrees_with_oracle():
    spec = _income_source_spec()
    marginals = oracle_marginals(spec)
    table = generate_faux(spec, 11)
    n = table.n
    levels = table.schema["income_source"].levels
    observed = np.bincount(table.values("income_source"), minlength=len(levels)) / n
    for level, share in zip(levels, observed):
        expected = marginals["income_source"]["frequencies"][level]
        assert abs(share - expected) < 4 * np.sqrt(expected * (1 - expected) / n) + 1e-12
    chd = table.values("chd")
    assert abs(chd.mean() - marginals["chd"]["mean"]) < 4 * chd.std(ddof=1) / np.sqrt(n)


def test_untracked_rules_fall_back_to_monte_carlo():
    spec = replace(paperlike_small(), n=1_000, rules=paperlike_small().rules[:2])
    marginals = oracle_marginals(spec, mc_samples=50_000)
    assert marginals["income_pct"]["method"] == "monte_carlo"
    assert marginals["income_pct"]["se"]["mean"] > 0.0
    assert 1.0 <= marginals["income_pct"]["mean"] <= 100.0
