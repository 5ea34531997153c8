"""
Natural cubic spline bases and the three regression engines used by the chain:
least squares, binary logistic (IRLS) and multinomial logistic (Newton).

All fits are pure functions of their inputs. Collinear columns are removed by
an ordered pivoted elimination that keeps earlier columns and drops later ones,
so repeated fits of the same design are bit-identical.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg
from scipy.special import expit, log_expit, log_softmax, softmax

from errors import ConvergenceError, NumericError, SchemaError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 50
SEPARATION_RIDGE = 1e-6
# |eta| beyond this means fitted probabilities of 1e-13 or less
_SEPARATION_ETA = 30.0
# consecutive iterations of growing coefficients with undiminished Newton steps
_DIVERGING_ITERATIONS = 5
_RANK_TOL = 1e-10
_MAX_HALVINGS = 30

AGE_KNOTS = (0, 10, 17, 20, 25, 30, 50, 55, 60, 66, 70, 80, 90, 100)
ZSCORE_KNOTS = (-2, -1, 0, 1, 2)


@dataclass(frozen=True)
class SplineDef:
    knots: Tuple[float, ...]

    def __post_init__(self):
        knots = tuple(float(k) for k in self.knots)
        if len(knots) < 3:
            raise SchemaError(f"A natural spline needs at least 3 knots, got {len(knots)}")
        if any(b <= a for a, b in zip(knots, knots[1:])):
            raise SchemaError(f"Spline knots must be strictly ascending: {list(knots)}")
        object.__setattr__(self, "knots", knots)

    @property
    def boundary(self) -> Tuple[float, float]:
        return self.knots[0], self.knots[-1]

    @property
    def internal(self) -> Tuple[float, ...]:
        return self.knots[1:-1]

    @property
    def dimension(self) -> int:
        return len(self.internal) + 1


def spline_basis(values, spline: SplineDef) -> np.ndarray:
    """
    Natural cubic spline basis (without intercept) in truncated power form:
    x, then d_k(x) - d_{K-1}(x) for k = 1..K-2 with
    d_k(x) = ((x - t_k)_+^3 - (x - t_K)_+^3) / (t_K - t_k).
    Second derivative vanishes outside the boundary knots.
    """
    x = np.asarray(values, dtype=np.float64)
    knots = np.asarray(spline.knots)
    last = knots[-1]

    def d(k: int) -> np.ndarray:
        return (np.maximum(x - knots[k], 0.0) ** 3 - np.maximum(x - last, 0.0) ** 3) / (last - knots[k])

    columns = [x]
    d_last = d(len(knots) - 2)
    for k in range(len(knots) - 2):
        columns.append(d(k) - d_last)
    return np.column_stack(columns)


@dataclass(frozen=True)
class ColumnDescriptor:
    """intercept | dummy(variable, level) | spline(variable, index) | raw(variable)
    | missing_indicator(variable) | factor(variable, level)"""

    kind: str
    variable: Optional[str] = None
    level: Optional[str] = None
    index: Optional[int] = None

    KINDS = ("intercept", "dummy", "spline", "raw", "missing_indicator", "factor")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise SchemaError(f"Unknown column kind '{self.kind}'")

    @property
    def label(self) -> str:
        if self.kind == "intercept":
            return "(intercept)"
        if self.kind in ("dummy", "factor"):
            return f"{self.variable}[{self.level}]"
        if self.kind == "spline":
            return f"ns({self.variable})[{self.index}]"
        if self.kind == "missing_indicator":
            return f"missing({self.variable})"
        return self.variable

    def to_dict(self) -> Dict:
        payload = {"kind": self.kind}
        if self.variable is not None:
            payload["variable"] = self.variable
        if self.level is not None:
            payload["level"] = self.level
        if self.index is not None:
            payload["index"] = self.index
        return payload

    @classmethod
    def from_dict(cls, payload: Dict) -> "ColumnDescriptor":
        return cls(payload["kind"], payload.get("variable"), payload.get("level"), payload.get("index"))


INTERCEPT = ColumnDescriptor("intercept")


@dataclass(frozen=True)
class DesignMatrix:
    values: np.ndarray
    descriptors: Tuple[ColumnDescriptor, ...]
    dropped: Tuple[ColumnDescriptor, ...] = ()

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValidationError("Design matrix must be two-dimensional")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "descriptors", tuple(self.descriptors))
        object.__setattr__(self, "dropped", tuple(self.dropped))
        if len(self.descriptors) != values.shape[1]:
            raise ValidationError(
                f"{len(self.descriptors)} descriptors for a design with {values.shape[1]} columns"
            )
        if set(self.dropped) & set(self.descriptors):
            raise ValidationError("Dropped columns overlap retained columns")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def k(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_array(cls, values, intercept: bool = True, names: Sequence[str] = None) -> "DesignMatrix":
        """Design from a plain array; columns are named raw predictors x1, x2, ..."""
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        names = list(names) if names else [f"x{i + 1}" for i in range(values.shape[1])]
        descriptors = [ColumnDescriptor("raw", name) for name in names]
        if intercept:
            values = np.column_stack([np.ones(values.shape[0]), values])
            descriptors = [INTERCEPT] + descriptors
        return cls(values, tuple(descriptors))

    def select(self, descriptors: Sequence[ColumnDescriptor]) -> np.ndarray:
        """Columns in the order of ``descriptors``; every one must be present."""
        if tuple(descriptors) == self.descriptors:
            return self.values
        position = {d: i for i, d in enumerate(self.descriptors)}
        absent = [d.label for d in descriptors if d not in position]
        if absent:
            raise ValidationError(f"Design matrix lacks fitted columns {absent}")
        return self.values[:, [position[d] for d in descriptors]]


def independent_columns(values: np.ndarray, tol: float = _RANK_TOL) -> List[int]:
    """
    Ordered pivoted elimination on the scaled Gram matrix: a column is kept when
    its squared residual after projection on the kept earlier columns exceeds ``tol``.
    """
    gram = values.T @ values
    norms = np.sqrt(np.clip(np.diag(gram), 0.0, None))
    kept: List[int] = []
    chol = np.zeros((0, 0))
    for j in range(values.shape[1]):
        if norms[j] == 0.0:
            continue
        if not kept:
            kept.append(j)
            chol = np.ones((1, 1))
            continue
        r = gram[kept, j] / (norms[kept] * norms[j])
        z = linalg.solve_triangular(chol, r, lower=True)
        residual = 1.0 - float(z @ z)
        if residual > tol:
            size = len(kept)
            grown = np.zeros((size + 1, size + 1))
            grown[:size, :size] = chol
            grown[size, :size] = z
            grown[size, size] = np.sqrt(residual)
            chol = grown
            kept.append(j)
    return kept


def _retain(X: DesignMatrix) -> Tuple[np.ndarray, Tuple[ColumnDescriptor, ...], Tuple[ColumnDescriptor, ...]]:
    kept = independent_columns(X.values)
    kept_set = set(kept)
    dropped = X.dropped + tuple(d for i, d in enumerate(X.descriptors) if i not in kept_set)
    return X.values[:, kept], tuple(X.descriptors[i] for i in kept), dropped


def _symmetrize(matrix: np.ndarray) -> np.ndarray:
    return 0.5 * (matrix + matrix.T)


@dataclass(frozen=True)
class LinearFit:
    coefficients: np.ndarray
    sigma: float
    covariance: np.ndarray
    n: int
    k: int
    descriptors: Tuple[ColumnDescriptor, ...]
    dropped: Tuple[ColumnDescriptor, ...] = ()
    warnings: Tuple[str, ...] = ()
    family: str = field(default="linear", init=False)


@dataclass(frozen=True)
class LogisticFit:
    coefficients: np.ndarray
    covariance: np.ndarray
    converged: bool
    iterations: int
    ridge: float
    n: int
    k: int
    descriptors: Tuple[ColumnDescriptor, ...]
    dropped: Tuple[ColumnDescriptor, ...] = ()
    family: str = field(default="logistic", init=False)


@dataclass(frozen=True)
class MultinomialFit:
    """Coefficients are (J-1, k): one row per non-reference level."""

    coefficients: np.ndarray
    covariance: np.ndarray
    converged: bool
    iterations: int
    ridge: float
    n_levels: int
    n: int
    k: int
    descriptors: Tuple[ColumnDescriptor, ...]
    dropped: Tuple[ColumnDescriptor, ...] = ()
    family: str = field(default="multinomial", init=False)


Fit = Union[LinearFit, LogisticFit, MultinomialFit]


def fit_linear(X: DesignMatrix, y) -> LinearFit:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (X.n,):
        raise ValidationError(f"Response has shape {y.shape}, expected ({X.n},)")
    if not np.all(np.isfinite(y)):
        raise ValidationError("Response contains non-finite values")
    values, descriptors, dropped = _retain(X)
    n, k = values.shape
    if n <= k:
        raise NumericError(f"Linear fit needs n > k after collinearity drops (n={n}, k={k})")

    q, r = linalg.qr(values, mode="economic")
    beta = linalg.solve_triangular(r, q.T @ y)
    residuals = y - values @ beta
    rss = float(residuals @ residuals)
    if rss <= (1e-12 * max(1.0, float(np.linalg.norm(y)))) ** 2:
        rss = 0.0
    sigma = float(np.sqrt(rss / (n - k)))
    r_inv = linalg.solve_triangular(r, np.eye(k))
    covariance = _symmetrize(sigma ** 2 * (r_inv @ r_inv.T))

    warnings = []
    if np.ptp(y) == 0.0:
        warnings.append("constant_response")
        logger.warning("Linear fit on a constant response; residual sd is 0")
    if dropped:
        logger.debug("Dropped collinear columns %s", [d.label for d in dropped])
    return LinearFit(beta, sigma, covariance, n, k, descriptors, dropped, tuple(warnings))


def logistic_loglik(beta, X: np.ndarray, y, ridge: float = 0.0) -> float:
    eta = X @ beta
    return float(np.sum(y * log_expit(eta) + (1 - y) * log_expit(-eta)) - 0.5 * ridge * beta @ beta)


def logistic_gradient(beta, X: np.ndarray, y, ridge: float = 0.0) -> np.ndarray:
    return X.T @ (y - expit(X @ beta)) - ridge * beta


def multinomial_loglik(B, X: np.ndarray, y, ridge: float = 0.0) -> float:
    """``B`` is (J-1, k); ``y`` holds level codes 0..J-1 with 0 the reference."""
    eta = np.column_stack([np.zeros(X.shape[0]), X @ B.T])
    logp = log_softmax(eta, axis=1)
    return float(np.sum(logp[np.arange(X.shape[0]), y]) - 0.5 * ridge * np.sum(B * B))


def multinomial_gradient(B, X: np.ndarray, y, ridge: float = 0.0) -> np.ndarray:
    eta = np.column_stack([np.zeros(X.shape[0]), X @ B.T])
    p = softmax(eta, axis=1)
    indicator = np.zeros_like(p)
    indicator[np.arange(X.shape[0]), y] = 1.0
    return (indicator - p)[:, 1:].T @ X - ridge * B


def _newton_solve(hessian: np.ndarray, gradient: np.ndarray) -> np.ndarray:
    try:
        return linalg.cho_solve(linalg.cho_factor(hessian), gradient)
    except linalg.LinAlgError:
        return np.linalg.lstsq(hessian, gradient, rcond=None)[0]


def _inverse_information(hessian: np.ndarray) -> np.ndarray:
    try:
        return _symmetrize(linalg.cho_solve(linalg.cho_factor(hessian), np.eye(hessian.shape[0])))
    except linalg.LinAlgError:
        return _symmetrize(np.linalg.pinv(hessian))


def _newton(loglik, gradient, hessian, start: np.ndarray, tol: float, max_iter: int, eta_bound=None):
    """
    Damped Newton ascent. Returns (params, converged, iterations, separated).
    Convergence is judged on the full Newton step, before any halving.
    ``separated`` means the coefficients kept growing by undiminished steps
    while the linear predictor left the representable range; it is never set
    when ``eta_bound`` is None.
    """
    params = start.copy()
    current = loglik(params)
    growing = 0
    previous_size = previous_norm = None
    for iteration in range(1, max_iter + 1):
        full = _newton_solve(hessian(params), gradient(params).ravel()).reshape(params.shape)
        size = float(np.max(np.abs(full)))
        if size < tol:
            return params + full, True, iteration, False
        step = full
        candidate = params + step
        trial = loglik(candidate)
        halvings = 0
        while not trial >= current - 1e-12 * abs(current) and halvings < _MAX_HALVINGS:
            step = step / 2.0
            candidate = params + step
            trial = loglik(candidate)
            halvings += 1
        params, current = candidate, trial
        norm = float(np.max(np.abs(params)))
        if previous_size is not None and norm > previous_norm and size >= 0.5 * previous_size:
            growing += 1
        else:
            growing = 0
        previous_size, previous_norm = size, norm
        if eta_bound is not None and growing >= _DIVERGING_ITERATIONS and eta_bound(params) > _SEPARATION_ETA:
            return params, False, iteration, True
    return params, False, max_iter, False


def fit_logistic(X: DesignMatrix, y, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                 ridge: float = 0.0) -> LogisticFit:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (X.n,):
        raise ValidationError(f"Response has shape {y.shape}, expected ({X.n},)")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("Logistic response must be 0/1")
    if y.min() == y.max():
        raise NumericError("Logistic response has a single class")
    values, descriptors, dropped = _retain(X)
    n, k = values.shape
    if n <= k:
        raise NumericError(f"Logistic fit needs n > k (n={n}, k={k})")

    def hessian_at(lam):
        def hessian(beta):
            p = expit(values @ beta)
            return (values.T * (p * (1 - p))) @ values + lam * np.eye(k)
        return hessian

    def run(lam, iterations, bound):
        return _newton(
            lambda b: logistic_loglik(b, values, y, lam),
            lambda b: logistic_gradient(b, values, y, lam),
            hessian_at(lam),
            np.zeros(k), tol, iterations, bound,
        )

    beta, converged, iterations, separated = run(ridge, max_iter, lambda b: float(np.max(np.abs(values @ b))))
    if separated and ridge == 0.0:
        logger.warning("Separation detected (n=%d, k=%d); refitting with ridge %g", n, k, SEPARATION_RIDGE)
        ridge = SEPARATION_RIDGE
        beta, converged, iterations, _ = run(ridge, 4 * max_iter, None)
    if not converged:
        raise ConvergenceError(f"Logistic fit did not converge within {max_iter} iterations")
    covariance = _inverse_information(hessian_at(ridge)(beta))
    return LogisticFit(beta, covariance, True, iterations, ridge, n, k, descriptors, dropped)


def _multinomial_hessian(values: np.ndarray, B: np.ndarray, ridge: float) -> np.ndarray:
    k = values.shape[1]
    m = B.shape[0]
    eta = np.column_stack([np.zeros(values.shape[0]), values @ B.T])
    p = softmax(eta, axis=1)[:, 1:]
    hessian = np.empty((m * k, m * k))
    for a in range(m):
        for b in range(a, m):
            weights = p[:, a] * ((1.0 if a == b else 0.0) - p[:, b])
            block = (values.T * weights) @ values
            hessian[a * k:(a + 1) * k, b * k:(b + 1) * k] = block
            hessian[b * k:(b + 1) * k, a * k:(a + 1) * k] = block.T
    return hessian + ridge * np.eye(m * k)


def fit_multinomial(X: DesignMatrix, y, n_levels: int, tol: float = DEFAULT_TOL,
                    max_iter: int = DEFAULT_MAX_ITER, ridge: float = 0.0) -> MultinomialFit:
    """``y`` holds level codes 0..n_levels-1; level 0 is the reference."""
    y = np.asarray(y)
    if y.shape != (X.n,):
        raise ValidationError(f"Response has shape {y.shape}, expected ({X.n},)")
    if n_levels < 2:
        raise ValidationError("Multinomial outcome needs at least 2 levels")
    y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= n_levels:
        raise ValidationError("Multinomial response codes out of range")
    counts = np.bincount(y, minlength=n_levels)
    if np.any(counts == 0):
        raise NumericError(f"Outcome levels {np.flatnonzero(counts == 0).tolist()} are absent")
    values, descriptors, dropped = _retain(X)
    n, k = values.shape
    if n <= k:
        raise NumericError(f"Multinomial fit needs n > k (n={n}, k={k})")
    m = n_levels - 1

    def run(lam, iterations, bound):
        return _newton(
            lambda b: multinomial_loglik(b, values, y, lam),
            lambda b: multinomial_gradient(b, values, y, lam),
            lambda b: _multinomial_hessian(values, b, lam),
            np.zeros((m, k)), tol, iterations, bound,
        )

    B, converged, iterations, separated = run(ridge, max_iter, lambda b: float(np.max(np.abs(values @ b.T))))
    if separated and ridge == 0.0:
        logger.warning("Separation detected (n=%d, k=%d, J=%d); refitting with ridge %g",
                       n, k, n_levels, SEPARATION_RIDGE)
        ridge = SEPARATION_RIDGE
        B, converged, iterations, _ = run(ridge, 4 * max_iter, None)
    if not converged:
        raise ConvergenceError(f"Multinomial fit did not converge within {max_iter} iterations")
    covariance = _inverse_information(_multinomial_hessian(values, B, ridge))
    return MultinomialFit(B, covariance, True, iterations, ridge, n_levels, n, k, descriptors, dropped)


def linear_predictor(fit: Fit, values: np.ndarray) -> np.ndarray:
    """Xb for linear/logistic fits, (n, J-1) for multinomial; ``values`` aligned with fit.descriptors."""
    if fit.family == "multinomial":
        return values @ np.asarray(fit.coefficients).T
    return values @ np.asarray(fit.coefficients)


def predict(fit: Fit, X: DesignMatrix) -> np.ndarray:
    """Mean (linear), P(y=1) (logistic) or an (n, J) probability matrix (multinomial)."""
    values = X.select(fit.descriptors)
    eta = linear_predictor(fit, values)
    if fit.family == "linear":
        return eta
    if fit.family == "logistic":
        return expit(eta)
    return softmax(np.column_stack([np.zeros(values.shape[0]), eta]), axis=1)
