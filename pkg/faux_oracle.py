"""
Faux "confidential" populations drawn from stated rules, and the exact (or
Monte Carlo) marginals those rules imply.

Rules use only the families the chain fits (multinomial/logistic logits,
linear with normal residuals, logit-linear probabilities), so a chain fitted
on a faux population is correctly specified and its synthetic output can be
checked against known truth.
"""
import json
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, softmax

from chain_config import FILTER_OPS, ChainConfig, PopulationFilter, default_chain, default_schema
from errors import ConfigError
from generator import _HERMITE_NODES, _HERMITE_WEIGHTS, RngContract
from schema_core import PopulationSchema, PopulationTable, VariableSpec, zscore_to_percentile

logger = logging.getLogger(__name__)

FAUX_STREAM = 7
PERCENTILE_MOMENTS = (50.5, 28.866)
STATE_LIMIT = 2_000_000
_SEED_ENTRY = 1000
_SURVEY_ENTRY = 2000
_DRAW_MCAR = 2
_SKEW_SHAPE = 0.5

Coefficient = Union[float, Tuple[float, ...]]


@dataclass(frozen=True)
class Term:
    """coefficient * indicator(source == level), or coefficient * (source - center) / scale."""

    source: str
    coefficient: Coefficient
    level: Optional[str] = None
    center: float = 0.0
    scale: float = 1.0

    def to_dict(self) -> Dict:
        return {"source": self.source, "coefficient": _plain(self.coefficient), "level": self.level,
                "center": self.center, "scale": self.scale}

    @classmethod
    def from_dict(cls, payload: Mapping) -> "Term":
        return cls(payload["source"], _coef(payload["coefficient"]), payload.get("level"),
                   float(payload.get("center", 0.0)), float(payload.get("scale", 1.0)))


@dataclass(frozen=True)
class FauxRule:
    variable: str
    family: str
    intercept: Coefficient
    terms: Tuple[Term, ...] = ()
    sigma: float = 0.0
    residual: str = "normal"
    population_filter: Optional[PopulationFilter] = None
    mcar: float = 0.0
    survey_only: bool = False

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if self.sigma < 0:
            raise ConfigError(f"Rule '{self.variable}': sigma must be non-negative")
        if self.residual not in ("normal", "skewed"):
            raise ConfigError(f"Rule '{self.variable}': unknown residual '{self.residual}'")
        if not 0.0 <= self.mcar < 1.0:
            raise ConfigError(f"Rule '{self.variable}': MCAR rate must lie in [0, 1)")

    def sources(self) -> List[str]:
        names = [t.source for t in self.terms]
        if self.population_filter is not None:
            names.append(self.population_filter.variable)
        return names

    def to_dict(self) -> Dict:
        return {
            "variable": self.variable,
            "family": self.family,
            "intercept": _plain(self.intercept),
            "terms": [t.to_dict() for t in self.terms],
            "sigma": self.sigma,
            "residual": self.residual,
            "population_filter": None if self.population_filter is None else self.population_filter.to_dict(),
            "mcar": self.mcar,
            "survey_only": self.survey_only,
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "FauxRule":
        pf = payload.get("population_filter")
        return cls(
            variable=payload["variable"],
            family=payload["family"],
            intercept=_coef(payload["intercept"]),
            terms=tuple(Term.from_dict(t) for t in payload.get("terms", ())),
            sigma=float(payload.get("sigma", 0.0)),
            residual=payload.get("residual", "normal"),
            population_filter=None if pf is None else PopulationFilter.from_dict(pf),
            mcar=float(payload.get("mcar", 0.0)),
            survey_only=bool(payload.get("survey_only", False)),
        )


def _plain(value: Coefficient):
    return list(value) if isinstance(value, tuple) else value


def _coef(value) -> Coefficient:
    return tuple(float(v) for v in value) if isinstance(value, (list, tuple)) else float(value)


@dataclass(frozen=True)
class FauxSpec:
    name: str
    n: int
    rules: Tuple[FauxRule, ...]
    age_max: int = 100
    n_regions: int = 40
    n_urbanity: int = 5
    male_share: float = 0.495
    survey_rate: float = 0.02
    variables: Tuple[VariableSpec, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "rules", tuple(self.rules))
        object.__setattr__(self, "variables", tuple(self.variables))
        if self.n < 1:
            raise ConfigError("Faux population size must be positive")
        if not 0.0 < self.survey_rate <= 1.0:
            raise ConfigError("Survey rate must lie in (0, 1]")
        schema = self.schema()
        available = set(schema.seed_names)
        for rule in self.rules:
            spec = schema[rule.variable]
            for source in rule.sources():
                if source not in available:
                    raise ConfigError(f"Rule '{rule.variable}' uses '{source}' before it is generated")
            _check_rule(rule, spec)
            available.add(rule.variable)

    def schema(self) -> PopulationSchema:
        base = default_schema(self.n_regions, self.n_urbanity)
        custom = {v.name: v for v in self.variables}
        seeds = [v for v in base.variables if v.name in base.seed_names]
        modeled = []
        for rule in self.rules:
            if rule.variable in custom:
                modeled.append(custom[rule.variable])
            elif rule.variable in base:
                modeled.append(base[rule.variable])
            else:
                raise ConfigError(f"Rule variable '{rule.variable}' has no variable definition")
        return PopulationSchema(tuple(seeds + modeled), base.seed_names)

    def chain(self) -> ChainConfig:
        """The built-in chain restricted to the variables this spec generates."""
        return default_chain().restricted_to([rule.variable for rule in self.rules])

    def age_weights(self) -> np.ndarray:
        ages = np.arange(self.age_max + 1)
        weights = np.where(ages <= 55, 1.0, 1.0 - 0.95 * (ages - 55) / max(self.age_max - 55, 1))
        return weights / weights.sum()

    def region_weights(self) -> np.ndarray:
        weights = np.ones(self.n_regions)
        weights[0] = 3.0
        return weights / weights.sum()

    def urbanity_weights(self) -> np.ndarray:
        weights = np.linspace(1.5, 0.5, self.n_urbanity)
        return weights / weights.sum()

    def to_dict(self) -> Dict:
        return {
            "name": self.name,
            "n": self.n,
            "age_max": self.age_max,
            "n_regions": self.n_regions,
            "n_urbanity": self.n_urbanity,
            "male_share": self.male_share,
            "survey_rate": self.survey_rate,
            "variables": [v.to_dict() for v in self.variables],
            "rules": [r.to_dict() for r in self.rules],
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "FauxSpec":
        try:
            return cls(
                name=payload.get("name", "custom"),
                n=int(payload["n"]),
                rules=tuple(FauxRule.from_dict(r) for r in payload["rules"]),
                age_max=int(payload.get("age_max", 100)),
                n_regions=int(payload.get("n_regions", 40)),
                n_urbanity=int(payload.get("n_urbanity", 5)),
                male_share=float(payload.get("male_share", 0.495)),
                survey_rate=float(payload.get("survey_rate", 0.02)),
                variables=tuple(VariableSpec.from_dict(v) for v in payload.get("variables", ())),
            )
        except KeyError as e:
            raise ConfigError(f"Faux spec is missing field {e}")

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path: str) -> "FauxSpec":
        try:
            with open(path, "r", encoding="utf-8") as f:
                return cls.from_dict(json.load(f))
        except FileNotFoundError:
            raise ConfigError(f"Faux spec not found: {path}")


def _check_rule(rule: FauxRule, spec: VariableSpec) -> None:
    width = len(spec.levels) - 1 if spec.is_categorical else 1
    if rule.family == "multinomial" and not spec.is_categorical:
        raise ConfigError(f"Rule '{rule.variable}': multinomial needs a categorical variable")
    if rule.family == "logistic" and not (spec.is_categorical and len(spec.levels) == 2):
        raise ConfigError(f"Rule '{rule.variable}': logistic needs a two-level variable")
    if rule.family == "linear" and spec.kind not in ("continuous", "percentile"):
        raise ConfigError(f"Rule '{rule.variable}': linear needs a continuous or percentile variable")
    if rule.family == "logit_linear" and spec.kind != "probability":
        raise ConfigError(f"Rule '{rule.variable}': logit_linear needs a probability variable")
    if rule.family not in ("multinomial", "logistic", "linear", "logit_linear"):
        raise ConfigError(f"Rule '{rule.variable}': unknown family '{rule.family}'")
    expected = width if rule.family == "multinomial" else 1
    for value in [rule.intercept] + [t.coefficient for t in rule.terms]:
        size = len(value) if isinstance(value, tuple) else 1
        if size != expected:
            raise ConfigError(f"Rule '{rule.variable}': coefficients need {expected} values, got {size}")


def _eta(rule: FauxRule, arrays: Mapping[str, np.ndarray], schema: PopulationSchema, n: int) -> np.ndarray:
    """Linear predictor per row: (n,) or (n, J-1) for multinomial rules. Missing sources contribute 0."""
    width = len(rule.intercept) if isinstance(rule.intercept, tuple) else 0
    shape = (n, width) if width else (n,)
    eta = np.broadcast_to(np.asarray(rule.intercept, dtype=np.float64), shape).copy()
    for term in rule.terms:
        spec = schema[term.source]
        values = arrays[term.source]
        if spec.is_categorical:
            x = (values == spec.level_code(term.level)).astype(np.float64)
        else:
            x = np.nan_to_num((values - term.center) / term.scale, nan=0.0)
        coefficient = np.asarray(term.coefficient, dtype=np.float64)
        eta += x[:, None] * coefficient if width else x * coefficient
    return eta


def _filter_mask(rule: FauxRule, arrays: Mapping[str, np.ndarray], schema: PopulationSchema, n: int) -> np.ndarray:
    pf = rule.population_filter
    if pf is None:
        return np.ones(n, dtype=bool)
    spec = schema[pf.variable]
    values = arrays[pf.variable]
    if spec.is_categorical:
        return FILTER_OPS[pf.op](values, spec.level_code(str(pf.value))) & (values >= 0)
    return FILTER_OPS[pf.op](np.nan_to_num(values, nan=-np.inf), float(pf.value)) & ~np.isnan(values)


def _standard_residual(rule: FauxRule, z: np.ndarray) -> np.ndarray:
    if rule.residual == "normal":
        return z
    s = _SKEW_SHAPE
    mean = np.exp(s * s / 2.0)
    sd = np.sqrt((np.exp(s * s) - 1.0) * np.exp(s * s))
    return (np.exp(s * z) - mean) / sd


def _draw_rule(rule: FauxRule, spec: VariableSpec, eta: np.ndarray, rng: RngContract, rows: np.ndarray,
               index: int) -> np.ndarray:
    if rule.family == "multinomial":
        probabilities = softmax(np.column_stack([np.zeros(rows.size), eta]), axis=1)
        return rng.categorical(rows, index, probabilities)
    if rule.family == "logistic":
        return (rng.uniforms(rows, index) < expit(eta)).astype(np.int64)
    noise = rule.sigma * _standard_residual(rule, rng.normals(rows, index))
    if rule.family == "logit_linear":
        return expit(eta + noise)
    y = eta + noise
    if spec.kind == "percentile":
        return zscore_to_percentile(y, *PERCENTILE_MOMENTS)
    y = np.clip(y, -np.inf if spec.min is None else spec.min, np.inf if spec.max is None else spec.max)
    return np.rint(y) if spec.integer_valued else y


def _seed_arrays(spec: FauxSpec, rng: RngContract, rows: np.ndarray) -> Dict[str, np.ndarray]:
    def inverse(weights: np.ndarray, entry: int) -> np.ndarray:
        cdf = np.cumsum(weights)
        codes = np.searchsorted(cdf / cdf[-1], rng.uniforms(rows, _SEED_ENTRY + entry), side="right")
        return np.minimum(codes, weights.size - 1).astype(np.int64)

    return {
        "age": inverse(spec.age_weights(), 0).astype(np.float64),
        "gender": (rng.uniforms(rows, _SEED_ENTRY + 1) >= spec.male_share).astype(np.int64),
        "region": inverse(spec.region_weights(), 2),
        "urbanity": inverse(spec.urbanity_weights(), 3),
    }


def generate_faux(spec: FauxSpec, seed: int, inject_missing: bool = True) -> PopulationTable:
    """
    Draw ``spec.n`` records: seeds first, then every rule in order, then
    survey-subsample and MCAR missingness (never in seed columns).
    """
    schema = spec.schema()
    rng = RngContract(seed, FAUX_STREAM)
    rows = np.arange(spec.n)
    arrays = _seed_arrays(spec, rng, rows)
    for index, rule in enumerate(spec.rules):
        variable = schema[rule.variable]
        eligible = _filter_mask(rule, arrays, schema, spec.n)
        values = _draw_rule(rule, variable, _eta(rule, arrays, schema, spec.n), rng, rows, index)
        if variable.is_categorical:
            arrays[rule.variable] = np.where(eligible, values, -1).astype(np.int64)
        else:
            arrays[rule.variable] = np.where(eligible, values, np.nan)

    if inject_missing:
        survey = rng.uniforms(rows, _SURVEY_ENTRY) < spec.survey_rate
        for index, rule in enumerate(spec.rules):
            hidden = np.zeros(spec.n, dtype=bool)
            if rule.survey_only:
                hidden |= ~survey
            if rule.mcar > 0.0:
                hidden |= rng.uniforms(rows, index, _DRAW_MCAR) < rule.mcar
            if hidden.any():
                missing_value = -1 if schema[rule.variable].is_categorical else np.nan
                arrays[rule.variable] = np.where(hidden, missing_value, arrays[rule.variable])
    table = PopulationTable.from_arrays(schema, arrays)
    logger.info("Generated faux population '%s': %d records, %d rules", spec.name, table.n, len(spec.rules))
    return table


def _seed_cells(spec: FauxSpec) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """Every (age, gender, region, urbanity) cell with its probability."""
    p_age = spec.age_weights()
    p_gender = np.array([spec.male_share, 1.0 - spec.male_share])
    p_region = spec.region_weights()
    p_urbanity = spec.urbanity_weights()
    grids = np.meshgrid(np.arange(p_age.size), np.arange(2), np.arange(p_region.size), np.arange(p_urbanity.size),
                        indexing="ij")
    age, gender, region, urbanity = (g.ravel() for g in grids)
    weight = p_age[age] * p_gender[gender] * p_region[region] * p_urbanity[urbanity]
    arrays = {"age": age.astype(np.float64), "gender": gender.astype(np.int64),
              "region": region.astype(np.int64), "urbanity": urbanity.astype(np.int64)}
    return arrays, weight


def _categorical_probabilities(rule: FauxRule, eta: np.ndarray) -> np.ndarray:
    if rule.family == "logistic":
        p = expit(eta)
        return np.column_stack([1.0 - p, p])
    return softmax(np.column_stack([np.zeros(eta.shape[0]), eta]), axis=1)


def _marginal_record(spec: VariableSpec, method: str, values: Dict, se: Dict) -> Dict:
    return {"kind": spec.kind, "method": method, **values, "se": se}


def oracle_marginals(spec: FauxSpec, mc_samples: int = 1_000_000, seed: int = 12345) -> Dict[str, Dict]:
    """
    Expected marginal of every variable. Seed variables and rules depending
    only on seeds and earlier exactly-tracked categorical variables are
    summed exactly over all cells; linear rules on such inputs use linearity
    of expectation and logit-linear rules Gauss-Hermite quadrature. Anything
    else is estimated from ``mc_samples`` draws, with its Monte Carlo standard error.
    """
    schema = spec.schema()
    state, weight = _seed_cells(spec)
    tracked = set(schema.seed_names)
    results: Dict[str, Dict] = {}

    total = weight.sum()
    age_mean = float(state["age"] @ weight / total)
    results["age"] = _marginal_record(schema["age"], "exact", {"mean": age_mean}, {"mean": 0.0})
    for name in ("gender", "region", "urbanity"):
        levels = schema[name].levels
        freq = np.bincount(state[name], weights=weight, minlength=len(levels)) / total
        results[name] = _marginal_record(schema[name], "exact",
                                         {"frequencies": dict(zip(levels, freq.tolist()))},
                                         {"frequencies": dict.fromkeys(levels, 0.0)})

    pending: List[FauxRule] = []
    for rule in spec.rules:
        variable = schema[rule.variable]
        if not set(rule.sources()) <= tracked:
            pending.append(rule)
            continue
        n = weight.size
        eligible = _filter_mask(rule, state, schema, n)
        w = np.where(eligible, weight, 0.0)
        if w.sum() == 0.0:
            pending.append(rule)
            continue
        eta = _eta(rule, state, schema, n)
        if rule.family in ("multinomial", "logistic"):
            probabilities = _categorical_probabilities(rule, eta)
            freq = (w @ probabilities) / w.sum()
            results[rule.variable] = _marginal_record(
                variable, "exact", {"frequencies": dict(zip(variable.levels, freq.tolist()))},
                {"frequencies": dict.fromkeys(variable.levels, 0.0)})
            j = probabilities.shape[1]
            if n * j <= STATE_LIMIT:
                state = {name: np.repeat(values, j) for name, values in state.items()}
                codes = np.tile(np.arange(j), n)
                state[rule.variable] = np.where(np.repeat(eligible, j), codes, -1).astype(np.int64)
                weight = np.where(np.repeat(eligible, j), np.repeat(weight, j) * probabilities.ravel(),
                                  np.where(codes == 0, np.repeat(weight, j), 0.0))
                tracked.add(rule.variable)
        elif rule.family == "linear" and variable.kind == "continuous":
            mean = float(w @ eta / w.sum())
            results[rule.variable] = _marginal_record(variable, "closed_form", {"mean": mean}, {"mean": 0.0})
        elif rule.family == "logit_linear" and rule.residual == "normal":
            expected = np.zeros(n)
            for node, node_weight in zip(_HERMITE_NODES, _HERMITE_WEIGHTS):
                expected += node_weight * expit(eta + rule.sigma * node)
            results[rule.variable] = _marginal_record(
                variable, "quadrature", {"mean": float(w @ expected / w.sum())}, {"mean": 0.0})
        else:
            pending.append(rule)

    if pending:
        sample = generate_faux(replace(spec, n=mc_samples), seed, inject_missing=False)
        for rule in pending:
            variable = schema[rule.variable]
            observed = ~sample.missing(rule.variable)
            values = sample.values(rule.variable)[observed]
            if variable.is_categorical:
                freq = np.bincount(values, minlength=len(variable.levels)) / values.size
                se = np.sqrt(freq * (1.0 - freq) / values.size)
                results[rule.variable] = _marginal_record(
                    variable, "monte_carlo", {"frequencies": dict(zip(variable.levels, freq.tolist()))},
                    {"frequencies": dict(zip(variable.levels, se.tolist()))})
            else:
                results[rule.variable] = _marginal_record(
                    variable, "monte_carlo", {"mean": float(values.mean())},
                    {"mean": float(values.std(ddof=1) / np.sqrt(values.size))})
        logger.info("Monte Carlo marginals for %s from %d draws", [r.variable for r in pending], mc_samples)
    return results


def _age(coefficient: Coefficient) -> Term:
    return Term("age", coefficient, center=40.0, scale=20.0)


def _pct(source: str, coefficient: Coefficient) -> Term:
    return Term(source, coefficient, center=PERCENTILE_MOMENTS[0], scale=PERCENTILE_MOMENTS[1])


def _registry_rules() -> Tuple[FauxRule, ...]:
    return (
        FauxRule("income_source", "multinomial",
                 intercept=(-2.3, -3.5, -2.8, -2.0, -3.5, -2.5, -2.3, -1.0, -2.6, -3.2, -2.2, -4.0, -0.8),
                 terms=(
                     _age((0.2, 0.4, -0.2, 0.4, 0.6, -0.3, 0.3, 2.2, 0.0, 0.2, -2.0, 0.0, -0.6)),
                     Term("gender", (0.1, -0.8, 0.2, -0.5, 0.3, 0.0, 0.2, 0.3, 0.3, 0.1, 0.1, 0.2, 0.9),
                          level="female"),
                     Term("urbanity", (0.0, 0.0, 0.1, 0.0, 0.2, 0.3, 0.1, 0.0, 0.4, 0.1, 0.0, 0.0, 0.1),
                          level="1"),
                 )),
        FauxRule("income_pct", "linear", intercept=0.2, sigma=0.8, terms=(
            _age(0.3),
            Term("gender", -0.2, level="female"),
            Term("income_source", 0.9, level="company_director"),
            Term("income_source", -0.9, level="unemployment"),
            Term("income_source", -0.7, level="disability"),
            Term("income_source", -0.4, level="retirement"),
            Term("income_source", -1.0, level="social_assistance"),
            Term("income_source", -0.8, level="study_grant"),
            Term("income_source", -1.1, level="no_income"),
        )),
        FauxRule("capital_pct", "linear", intercept=0.0, sigma=0.8, terms=(
            _pct("income_pct", 0.5), _age(0.4), Term("urbanity", -0.2, level="1"),
        )),
        FauxRule("household_type", "multinomial", intercept=(-4.0,), terms=(
            _age((0.8,)), Term("income_source", (1.5,), level="disability"),
        )),
        FauxRule("household_size", "multinomial",
                 intercept=(0.3, 0.0, 0.1, -0.6, -1.5),
                 terms=(
                     _age((-0.4, -0.8, -0.9, -0.9, -0.8)),
                     Term("household_type", (-2.5, -2.5, -2.5, -2.5, -2.5), level="institutional"),
                 )),
        FauxRule("ethnic_group", "multinomial",
                 intercept=(-3.2, -3.3, -3.3, -4.0, -2.6, -2.2),
                 terms=(
                     _age((-0.5, -0.5, -0.3, -0.5, -0.6, 0.0)),
                     Term("region", (0.8, 0.8, 0.9, 0.5, 0.4, 0.3), level="R01"),
                 )),
    )


def _lifestyle_rules(skewed_bmi: bool = False) -> Tuple[FauxRule, ...]:
    adults = PopulationFilter("age", ">", 18)
    return (
        FauxRule("smoking", "multinomial", intercept=(-0.8, -1.2, -2.5), survey_only=True, terms=(
            _age((0.8, -0.3, -0.2)),
            Term("gender", (-0.2, -0.3, -0.5), level="female"),
            _pct("income_pct", (0.0, -0.2, -0.4)),
        )),
        FauxRule("bmi", "linear", intercept=25.5, sigma=4.0, survey_only=True, population_filter=adults,
                 residual="skewed" if skewed_bmi else "normal", terms=(
                     _age(1.2),
                     Term("gender", -0.4, level="female"),
                     Term("smoking", -0.5, level="current"),
                     Term("smoking", -0.8, level="heavy"),
                     _pct("income_pct", -0.6),
                 )),
    )


def _health_rules() -> Tuple[FauxRule, ...]:
    def disease(name: str, intercept: float, age: float, smoking: float, bmi: float) -> FauxRule:
        return FauxRule(name, "logit_linear", intercept=intercept, sigma=0.3, terms=(
            _age(age),
            Term("smoking", smoking, level="current"),
            Term("smoking", 1.5 * smoking, level="heavy"),
            Term("bmi", bmi, center=25.0, scale=4.0),
        ))

    return (
        FauxRule("physical_activity", "multinomial", intercept=(0.4,), survey_only=True, terms=(
            _age((-0.5,)), Term("bmi", (-0.3,), center=25.0, scale=4.0),
        )),
        FauxRule("pancreas_cancer", "logistic", intercept=-7.0, terms=(
            _age(1.2), Term("smoking", 0.7, level="heavy"),
        )),
        FauxRule("lung_cancer", "logistic", intercept=-6.6, terms=(
            _age(1.3), Term("smoking", 1.0, level="current"), Term("smoking", 1.6, level="heavy"),
        )),
        disease("chd", -4.0, 1.0, 0.4, 0.3),
        disease("stroke", -4.5, 1.1, 0.3, 0.2),
        disease("diabetes", -3.2, 0.7, 0.1, 0.5),
        disease("copd", -4.2, 1.0, 0.8, 0.1),
    )


def paperlike_small() -> FauxSpec:
    return FauxSpec("paperlike-small", 100_000, _registry_rules(), n_regions=8)


def paperlike_full() -> FauxSpec:
    education = FauxRule("education", "multinomial", intercept=(0.5, 0.8, 0.0, -0.5), mcar=0.25, terms=(
        _age((-0.2, -0.3, -0.4, -0.4)),
        _pct("income_pct", (0.2, 0.4, 0.7, 1.0)),
    ))
    rules = _registry_rules() + (education,) + _lifestyle_rules() + _health_rules()
    return FauxSpec("paperlike-full", 1_000_000, rules, n_regions=12)


def skewed_bmi() -> FauxSpec:
    """Misspecified world: BMI residuals are log-normal, so normal-residual synthesis flattens its shape."""
    rules = _registry_rules()[:2] + _lifestyle_rules(skewed_bmi=True)
    return FauxSpec("skewed-bmi", 100_000, rules, n_regions=4, survey_rate=1.0)


PRESETS = {
    "paperlike-small": paperlike_small,
    "paperlike-full": paperlike_full,
    "skewed-bmi": skewed_bmi,
}


def faux_spec(name_or_path: str) -> FauxSpec:
    """A shipped preset by name, or a FauxSpec JSON file."""
    if name_or_path in PRESETS:
        return PRESETS[name_or_path]()
    if name_or_path.endswith(".json"):
        return FauxSpec.load(name_or_path)
    raise ConfigError(f"Unknown faux preset '{name_or_path}' (presets: {sorted(PRESETS)})")
