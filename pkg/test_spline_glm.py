import numpy as np
import pytest
from scipy.special import expit

from errors import NumericError, SchemaError, ValidationError
from spline_glm import (
    AGE_KNOTS,
    SEPARATION_RIDGE,
    ZSCORE_KNOTS,
    ColumnDescriptor,
    DesignMatrix,
    SplineDef,
    fit_linear,
    fit_logistic,
    fit_multinomial,
    independent_columns,
    logistic_gradient,
    multinomial_gradient,
    predict,
    spline_basis,
)
from spline_glm import _newton


def truncated_power_basis(x, knots):
    """Natural cubic spline basis written out term by term."""
    x = np.asarray(x, dtype=float)
    K = len(knots)
    out = np.empty((x.size, K - 1))
    for i, xi in enumerate(x):
        def d(k):
            return (max(xi - knots[k], 0.0) ** 3 - max(xi - knots[K - 1], 0.0) ** 3) / (knots[K - 1] - knots[k])
        out[i, 0] = xi
        for k in range(K - 2):
            out[i, k + 1] = d(k) - d(K - 2)
    return out


@pytest.mark.parametrize("knots, columns", [(AGE_KNOTS, 13), (ZSCORE_KNOTS, 4)])
def test_basis_dimension(knots, columns):
    spline = SplineDef(knots)
    assert spline.dimension == columns
    assert spline_basis(np.linspace(knots[0], knots[-1], 7), spline).shape == (7, columns)


@pytest.mark.parametrize("knots", [AGE_KNOTS, ZSCORE_KNOTS])
def test_basis_matches_truncated_power_oracle(knots):
    lo, hi = knots[0], knots[-1]
    x = np.linspace(lo - 0.5 * (hi - lo), hi + 0.5 * (hi - lo), 301)
    expected = truncated_power_basis(x, [float(k) for k in knots])
    np.testing.assert_allclose(spline_basis(x, SplineDef(knots)), expected, rtol=1e-10, atol=1e-10)


@pytest.mark.parametrize("knots", [AGE_KNOTS, ZSCORE_KNOTS])
def test_basis_is_linear_beyond_boundary_knots(knots):
    lo, hi = float(knots[0]), float(knots[-1])
    step = (hi - lo) / 10.0
    spline = SplineDef(knots)
    for start in (lo - 5 * step, hi):
        basis = spline_basis(start + step * np.arange(5), spline)
        second = np.diff(basis, n=2, axis=0)
        scale = max(1.0, float(np.abs(basis).max()))
        assert np.abs(second).max() <= 1e-8 * scale


def test_spline_knots_must_ascend():
    with pytest.raises(SchemaError):
        SplineDef((0, 2, 1))
    with pytest.raises(SchemaError):
        SplineDef((0, 1))


def test_collinear_columns_drop_later_ones():
    rng = np.random.default_rng(3)
    x = rng.normal(size=200)
    values = np.column_stack([np.ones(200), x, 2 * x + 1, rng.normal(size=200)])
    assert independent_columns(values) == [0, 1, 3]


def test_linear_fit_recovers_noiseless_line():
    x = np.arange(20, dtype=float)
    fit = fit_linear(DesignMatrix.from_array(x), 1.0 + 2.0 * x)
    np.testing.assert_allclose(fit.coefficients, [1.0, 2.0], atol=1e-10)
    assert fit.sigma == 0.0


def test_linear_fit_reports_dropped_duplicate():
    x = np.arange(30, dtype=float)
    X = DesignMatrix.from_array(np.column_stack([x, x]), names=["a", "b"])
    fit = fit_linear(X, 3.0 * x + np.sin(x))
    assert [d.variable for d in fit.dropped] == ["b"]
    assert fit.k == 2


def test_linear_fit_constant_response_warns():
    x = np.arange(10, dtype=float)
    fit = fit_linear(DesignMatrix.from_array(x), np.full(10, 4.0))
    assert "constant_response" in fit.warnings
    assert fit.sigma == 0.0


def test_linear_fit_needs_more_rows_than_columns():
    with pytest.raises(NumericError):
        fit_linear(DesignMatrix.from_array([1.0, 2.0]), [1.0, 3.0])


def _logistic_data(n, seed, beta=(-0.5, 1.0, -0.7)):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2))
    X = DesignMatrix.from_array(x)
    y = (rng.random(n) < expit(X.values @ np.asarray(beta))).astype(float)
    return X, y, np.asarray(beta)


def test_logistic_fit_recovers_coefficients():
    X, y, beta = _logistic_data(50_000, 11)
    fit = fit_logistic(X, y)
    se = np.sqrt(np.diag(fit.covariance))
    assert fit.converged
    assert np.all(np.abs(fit.coefficients - beta) < 4 * se)
    assert np.abs(logistic_gradient(fit.coefficients, X.values, y)).max() < 1e-6 * X.n


def test_logistic_rejects_single_class():
    X, _, _ = _logistic_data(100, 1)
    with pytest.raises(NumericError):
        fit_logistic(X, np.zeros(100))


def test_logistic_rejects_non_binary():
    X, y, _ = _logistic_data(100, 1)
    y[0] = 2.0
    with pytest.raises(ValidationError):
        fit_logistic(X, y)


def test_multinomial_with_two_levels_equals_logistic():
    X, y, _ = _logistic_data(5_000, 5)
    logistic = fit_logistic(X, y)
    multinomial = fit_multinomial(X, y.astype(int), 2)
    np.testing.assert_allclose(multinomial.coefficients[0], logistic.coefficients, atol=1e-6)
    np.testing.assert_allclose(multinomial.covariance, logistic.covariance, atol=1e-6)


def test_multinomial_fit_recovers_coefficients():
    rng = np.random.default_rng(21)
    n = 50_000
    X = DesignMatrix.from_array(rng.normal(size=(n, 2)))
    B = np.array([[0.3, 0.8, -0.4], [-0.6, -0.5, 0.9]])
    eta = np.column_stack([np.zeros(n), X.values @ B.T])
    p = np.exp(eta) / np.exp(eta).sum(axis=1, keepdims=True)
    y = (rng.random(n)[:, None] > np.cumsum(p, axis=1)).sum(axis=1)
    fit = fit_multinomial(X, y, 3)
    se = np.sqrt(np.diag(fit.covariance)).reshape(B.shape)
    assert np.all(np.abs(fit.coefficients - B) < 4 * se)
    assert np.abs(multinomial_gradient(fit.coefficients, X.values, y)).max() < 1e-6 * n
    probabilities = predict(fit, X)
    assert probabilities.shape == (n, 3)
    np.testing.assert_allclose(probabilities.sum(axis=1), 1.0)


def test_multinomial_absent_level_is_numeric_error():
    X, y, _ = _logistic_data(200, 2)
    with pytest.raises(NumericError, match="absent"):
        fit_multinomial(X, y.astype(int), 3)


def _intercept_only(n):
    return DesignMatrix.from_array(np.empty((n, 0)))


def test_intercept_only_logistic_is_log_odds():
    y = np.r_[np.ones(25), np.zeros(75)]
    fit = fit_logistic(_intercept_only(100), y)
    assert fit.coefficients[0] == pytest.approx(np.log(1.0 / 3.0), abs=1e-8)
    assert fit.coefficients[0] == pytest.approx(-1.0986, abs=1e-4)


def test_intercept_only_logistic_on_balanced_outcome_is_zero():
    fit = fit_logistic(_intercept_only(100), np.tile([0.0, 1.0], 50))
    assert fit.coefficients[0] == pytest.approx(0.0, abs=1e-12)
    assert fit.ridge == 0.0


def test_intercept_only_multinomial_is_log_ratio_of_counts():
    y = np.repeat([0, 1, 2], [50, 30, 20])
    fit = fit_multinomial(_intercept_only(100), y, 3)
    np.testing.assert_allclose(fit.coefficients[:, 0], [np.log(30 / 50), np.log(20 / 50)], atol=1e-8)


@pytest.mark.parametrize("repeats", [1, 50])
def test_separated_logistic_converges_with_ridge(caplog, repeats):
    x = np.tile([-2.0, -1.0, 1.0, 2.0], repeats)
    y = (x > 0).astype(float)
    fit = fit_logistic(DesignMatrix.from_array(x), y)
    assert fit.converged
    assert fit.ridge == SEPARATION_RIDGE
    assert fit.coefficients[1] > 5.0
    assert "Separation detected" in caplog.text


def test_one_extreme_row_is_not_separation(caplog):
    rng = np.random.default_rng(3)
    x = rng.normal(size=2000)
    y = (rng.random(2000) < expit(-0.5 + 0.8 * x)).astype(float)
    X = DesignMatrix.from_array(np.r_[x, 60.0])
    fit = fit_logistic(X, np.r_[y, 1.0])
    assert fit.converged
    assert fit.ridge == 0.0
    assert np.max(np.abs(X.values @ fit.coefficients)) > 30.0
    np.testing.assert_allclose(fit.coefficients, [-0.5, 0.8], atol=0.25)
    assert "Separation detected" not in caplog.text


def test_newton_does_not_converge_on_halved_steps():
    # the Hessian has the wrong sign, so every full step goes downhill and is halved away
    params, converged, iterations, separated = _newton(
        lambda b: -float(np.sum((b - 1.0) ** 2)),
        lambda b: 2.0 * (1.0 - b),
        lambda b: -np.eye(1),
        np.zeros(1), 1e-8, 20,
    )
    assert not converged
    assert iterations == 20
    assert not separated


def test_repeated_fits_are_identical():
    X, y, _ = _logistic_data(2_000, 8)
    a, b = fit_logistic(X, y), fit_logistic(X, y)
    assert np.array_equal(a.coefficients, b.coefficients)


def test_descriptor_labels():
    assert ColumnDescriptor("dummy", "smoking", "current").label == "smoking[current]"
    assert ColumnDescriptor("spline", "age", index=2).label == "ns(age)[2]"
    assert ColumnDescriptor("missing_indicator", "bmi").label == "missing(bmi)"
    with pytest.raises(SchemaError):
        ColumnDescriptor("interaction")


@pytest.mark.slow
def test_solver_coverage_over_reseeded_runs():
    hits = 0
    for seed in range(20):
        X, y, beta = _logistic_data(50_000, 100 + seed)
        fit = fit_logistic(X, y)
        se = np.sqrt(np.diag(fit.covariance))
        hits += bool(np.all(np.abs(fit.coefficients - beta) < 3 * se))
    assert hits >= 19
