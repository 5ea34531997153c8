"""
Fits the regression chain on a source population.

Each entry of the chain is regressed on the seed variables and every earlier
dependent, separately per stratum of its stratifiers. Strata that are too
small, lack an outcome level or fail numerically fall back to a pooled fit in
which the stratifiers enter as dummies. Entries flagged for imputation are
fitted once per imputation replicate and pooled with Rubin's rules.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, logit, softmax

from chain_config import ChainConfig, ModelSpecEntry, PopulationFilter, default_chain, default_schema
from errors import ConfigError, DisclosureError, NumericError, SynthPopError, ValidationError
from model_pack import EntryFit, Equation, ModelPack, export_seed_strata
from schema_core import (
    PopulationTable,
    StratumKey,
    VariableSpec,
    column_moments,
    make_stratum_key,
    recode_age_class_array,
    stratum_label,
)
from spline_glm import (
    INTERCEPT,
    ColumnDescriptor,
    DesignMatrix,
    SplineDef,
    fit_linear,
    fit_logistic,
    fit_multinomial,
    independent_columns,
    linear_predictor,
    spline_basis,
)

__all__ = [
    "ChainConfig", "ModelSpecEntry", "default_chain", "default_schema", "ImputationSet", "hot_deck_impute",
    "pool_rubin", "build_design", "encode", "fit_entry", "fit_chain", "entry_linear_predictor",
    "predict_entry", "crossvalidate", "CVReport",
]

logger = logging.getLogger(__name__)

PROBABILITY_CLAMP = 1e-6
FALLBACK_SMALL = "small_stratum"
FALLBACK_MIN_COUNT = "below_min_count"
FALLBACK_ABSENT_LEVEL = "absent_level"
FALLBACK_NUMERIC = "numeric_failure"


@dataclass(frozen=True)
class ImputationSet:
    """m completed copies of one source table; observed source cells are identical in all of them."""

    replicates: Tuple[PopulationTable, ...]
    source: Optional[PopulationTable] = None

    def __post_init__(self):
        replicates = tuple(self.replicates)
        if not replicates:
            raise ValidationError("An imputation set needs at least one replicate")
        object.__setattr__(self, "replicates", replicates)
        first = replicates[0]
        for i, table in enumerate(replicates[1:], start=2):
            if table.n != first.n or table.schema != first.schema:
                raise ValidationError(f"Imputation replicate {i} differs in size or schema from replicate 1")
        if self.source is not None:
            self._check_observed_cells()

    def _check_observed_cells(self) -> None:
        for name in self.source.schema.names:
            observed = ~self.source.missing(name)
            reference = self.source.values(name)[observed]
            for i, table in enumerate(self.replicates, start=1):
                values = table.values(name)[observed]
                if not np.array_equal(values, reference):
                    row = int(np.flatnonzero(observed)[np.flatnonzero(values != reference)[0]])
                    raise ValidationError(
                        f"Row {row + 1}, column '{name}': replicate {i} changes an observed source value"
                    )

    @property
    def m(self) -> int:
        return len(self.replicates)

    @property
    def base(self) -> PopulationTable:
        return self.source if self.source is not None else self.replicates[0]


FitData = Union[PopulationTable, ImputationSet]


def hot_deck_impute(table: PopulationTable, variables: Sequence[str], m: int, seed: int,
                    filters: Mapping[str, PopulationFilter] = None) -> ImputationSet:
    """
    Random hot-deck imputation within age class x gender cells. Survey variables
    are completed only on rows where at least one survey variable of
    ``variables`` is observed; other variables on every row. Rows failing a
    variable's population filter stay missing. Each replicate draws from its
    own deterministic stream.
    """
    filters = filters or {}
    schema = table.schema
    participants = np.zeros(table.n, dtype=bool)
    for name in variables:
        if schema[name].source_tag == "survey":
            participants |= ~table.missing(name)
    everyone = np.ones(table.n, dtype=bool)
    gender = table.values(schema.seed_names[1])
    age_class = recode_age_class_array(np.clip(table.values(schema.age_name), 0, 105))
    cells = age_class * len(schema[schema.seed_names[1]].levels) + gender
    replicates = []
    for r in range(m):
        arrays = {}
        for vi, name in enumerate(variables):
            column = table.column(name)
            eligible = filters[name].mask(table) if name in filters else np.ones(table.n, dtype=bool)
            scope = participants if schema[name].source_tag == "survey" else everyone
            targets = column.missing & eligible & scope
            if not targets.any():
                continue
            donors = ~column.missing & eligible
            if not donors.any():
                raise ValidationError(f"Variable '{name}' has no observed donor values to impute from")
            rng = np.random.default_rng([seed, r, vi])
            values = np.array(column.values, copy=True)
            for cell in np.unique(cells[targets]):
                in_cell = targets & (cells == cell)
                pool = np.flatnonzero(donors & (cells == cell))
                if pool.size == 0:
                    pool = np.flatnonzero(donors & (gender == gender[in_cell][0]))
                if pool.size == 0:
                    pool = np.flatnonzero(donors)
                values[in_cell] = values[rng.choice(pool, size=int(in_cell.sum()))]
            arrays[name] = values
        replicates.append(table.with_columns(arrays) if arrays else table)
    logger.info("Hot-deck imputation of %s: %d replicates", list(variables), m)
    return ImputationSet(tuple(replicates), table)


def pool_rubin(estimates, covariances) -> Tuple[np.ndarray, np.ndarray]:
    """Pooled estimate and total variance W + (1 + 1/m) B over m replicate fits."""
    estimates = np.asarray(estimates, dtype=np.float64)
    covariances = np.asarray(covariances, dtype=np.float64)
    m = estimates.shape[0]
    if m < 2:
        raise ValidationError("Pooling needs at least two replicate estimates")
    pooled = estimates.mean(axis=0)
    within = covariances.mean(axis=0)
    if estimates.ndim == 1:
        between = estimates.var(ddof=1)
    else:
        between = np.atleast_2d(np.cov(estimates, rowvar=False, ddof=1))
    return pooled, within + (1.0 + 1.0 / m) * between


def _transform(config: ChainConfig, entry: ModelSpecEntry, spec: VariableSpec, age_name: str):
    """(kind, spline) for a predictor: dummy, factor, spline, zscore_spline, zscore or raw."""
    transform = entry.transforms.get(spec.name)
    if transform is not None:
        if transform.kind in ("spline", "zscore_spline"):
            if transform.knots is not None:
                return transform.kind, SplineDef(transform.knots)
            if transform.kind == "spline" and spec.name != age_name:
                raise ConfigError(f"Spline transform of '{spec.name}' needs explicit knots")
            return transform.kind, config.age_spline if transform.kind == "spline" else config.zscore_spline
        return transform.kind, None
    if spec.is_categorical:
        return "dummy", None
    if spec.name == age_name:
        return "spline", config.age_spline
    if spec.kind == "percentile":
        return "zscore_spline", config.zscore_spline
    return "raw", None


def plan_columns(table: PopulationTable, rows: np.ndarray, config: ChainConfig, entry: ModelSpecEntry,
                 predictors: Sequence[str], missing_vars: Sequence[str]):
    """Column descriptors and spline definitions for ``predictors`` on ``rows``."""
    schema = table.schema
    descriptors: List[ColumnDescriptor] = [INTERCEPT]
    splines: Dict[str, SplineDef] = {}
    for name in predictors:
        spec = schema[name]
        kind, spline = _transform(config, entry, spec, schema.age_name)
        if kind == "dummy":
            descriptors.extend(ColumnDescriptor("dummy", name, level) for level in spec.levels[1:])
        elif kind == "factor":
            column = table.column(name)
            present = np.unique(column.values[rows][~column.missing[rows]]).astype(np.int64)
            descriptors.extend(ColumnDescriptor("factor", name, str(v)) for v in present[1:])
        elif kind in ("spline", "zscore_spline"):
            splines[name] = spline
            descriptors.extend(ColumnDescriptor("spline", name, index=i) for i in range(spline.dimension))
        else:
            descriptors.append(ColumnDescriptor("raw", name))
        if name in missing_vars:
            descriptors.append(ColumnDescriptor("missing_indicator", name))
    return tuple(descriptors), splines


def encode(table: PopulationTable, rows: np.ndarray, descriptors: Sequence[ColumnDescriptor],
           splines: Mapping[str, SplineDef], zscore: Mapping[str, Tuple[float, float]]) -> np.ndarray:
    """Design values for ``rows``; missing predictor values are zero-filled."""
    rows = np.asarray(rows)
    out = np.zeros((rows.size, len(descriptors)))
    cache: Dict[str, Tuple[np.ndarray, Optional[np.ndarray], np.ndarray]] = {}

    def prepared(name: str):
        if name not in cache:
            column = table.column(name)
            miss = column.missing[rows]
            x = column.values[rows].astype(np.float64)
            if name in zscore:
                mean, sd = zscore[name]
                x = (x - mean) / sd
            x = np.where(miss, 0.0, x)
            basis = None
            if name in splines:
                basis = spline_basis(x, splines[name])
                basis[miss] = 0.0
            cache[name] = (x, basis, miss)
        return cache[name]

    for j, d in enumerate(descriptors):
        if d.kind == "intercept":
            out[:, j] = 1.0
            continue
        x, basis, miss = prepared(d.variable)
        if d.kind == "dummy":
            code = table.schema[d.variable].level_code(d.level)
            out[:, j] = (table.values(d.variable)[rows] == code)
        elif d.kind == "factor":
            out[:, j] = (x == float(d.level)) & ~miss
        elif d.kind == "spline":
            if basis is None:
                raise ValidationError(f"No spline definition for '{d.variable}'")
            out[:, j] = basis[:, d.index]
        elif d.kind == "raw":
            out[:, j] = x
        else:
            out[:, j] = miss
    return out


def _response(table: PopulationTable, rows: np.ndarray, entry: ModelSpecEntry,
              response_zscore: Optional[Tuple[float, float]]) -> np.ndarray:
    y = table.values(entry.dependent)[rows]
    if entry.family == "linear":
        if response_zscore is not None:
            return (y - response_zscore[0]) / response_zscore[1]
        return y.astype(np.float64)
    if entry.family == "logit_linear":
        return logit(np.clip(y, PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP))
    if entry.family == "logistic":
        return (y != 0).astype(np.float64)
    return y.astype(np.int64)


def _moments(table: PopulationTable, config: ChainConfig, name: str) -> Tuple[float, float]:
    if name in config.zscore_moments:
        return config.zscore_moments[name]
    return column_moments(table.values(name))


def entry_mask(table: PopulationTable, config: ChainConfig, index: int) -> np.ndarray:
    """Rows an entry is fitted on: dependent observed, filter passed, required variables observed."""
    entry = config.entries[index]
    mask = ~table.missing(entry.dependent)
    if entry.population_filter is not None:
        mask &= entry.population_filter.mask(table)
    for name in entry.require_observed + entry.stratifiers:
        mask &= ~table.missing(name)
    if entry.missing_policy == "complete_case":
        for name in config.predictors_for(index):
            mask &= ~table.missing(name)
    return mask


def _stratum_groups(table: PopulationTable, rows: np.ndarray,
                    stratifiers: Sequence[str]) -> List[Tuple[StratumKey, np.ndarray]]:
    groups, keys = stratum_keys(table, rows, stratifiers)
    return sorted(((key, rows[groups == g]) for g, key in enumerate(keys)), key=lambda item: item[0])


def stratum_keys(table: PopulationTable, rows: np.ndarray, stratifiers: Sequence[str]) -> Tuple[np.ndarray, List]:
    """Group index per row and the stratum key of each group."""
    if not stratifiers:
        return np.zeros(len(rows), dtype=np.int64), [()]
    codes = np.column_stack([table.values(name)[rows] for name in stratifiers])
    if np.any(codes < 0):
        raise ValidationError(f"Stratifier values {list(stratifiers)} are missing for some records")
    combos, inverse = np.unique(codes, axis=0, return_inverse=True)
    keys = [
        make_stratum_key((name, table.schema[name].levels[int(c)]) for name, c in zip(stratifiers, combo))
        for combo in combos
    ]
    return np.asarray(inverse).ravel(), keys


@dataclass(frozen=True)
class DesignBundle:
    design: DesignMatrix
    response: np.ndarray
    rows: np.ndarray
    splines: Mapping[str, SplineDef]


def build_design(table: PopulationTable, config: ChainConfig, dependent: str, stratum: StratumKey = None,
                 zscore: Mapping[str, Tuple[float, float]] = None) -> DesignBundle:
    """
    Design matrix and response of one entry. With a ``stratum`` the rows are
    restricted to it and its stratifiers leave the predictor set; without one
    the stratifiers enter as dummies (the pooled design).
    """
    index = config.index_of(dependent)
    entry = config.entries[index]
    rows = np.flatnonzero(entry_mask(table, config, index))
    predictors = config.predictors_for(index)
    if stratum is not None and entry.stratifiers:
        wanted = dict(stratum)
        if set(wanted) != set(entry.stratifiers):
            raise ValidationError(f"Stratum {stratum_label(stratum)} does not match "
                                  f"stratifiers {list(entry.stratifiers)}")
        for name, level in wanted.items():
            rows = rows[table.values(name)[rows] == table.schema[name].level_code(level)]
        predictors = [v for v in predictors if v not in entry.stratifiers]
    else:
        predictors = predictors + [s for s in entry.stratifiers if s not in predictors]
    if rows.size == 0:
        raise ValidationError(f"No rows for '{dependent}' in stratum {stratum_label(stratum or ())}")
    zscore = dict(zscore) if zscore is not None else _zscore_map(table, config, entry, predictors)
    missing_vars = _missing_vars(table, rows, entry, predictors)
    descriptors, splines = plan_columns(table, rows, config, entry, predictors, missing_vars)
    values = encode(table, rows, descriptors, splines, zscore)
    response_z = _response_zscore(table, config, entry)
    return DesignBundle(DesignMatrix(values, descriptors), _response(table, rows, entry, response_z), rows, splines)


def _zscore_map(table: PopulationTable, config: ChainConfig, entry: ModelSpecEntry,
                predictors: Sequence[str]) -> Dict[str, Tuple[float, float]]:
    zscore = {}
    for name in predictors:
        kind, _ = _transform(config, entry, table.schema[name], table.schema.age_name)
        if kind in ("zscore", "zscore_spline"):
            zscore[name] = _moments(table, config, name)
    return zscore


def _response_zscore(table: PopulationTable, config: ChainConfig,
                     entry: ModelSpecEntry) -> Optional[Tuple[float, float]]:
    spec = table.schema[entry.dependent]
    transform = entry.transforms.get(entry.dependent)
    if entry.family == "linear" and spec.kind == "percentile" and (transform is None or transform.kind != "raw"):
        return _moments(table, config, entry.dependent)
    return None


def _missing_vars(table: PopulationTable, rows: np.ndarray, entry: ModelSpecEntry,
                  predictors: Sequence[str], others: Sequence[PopulationTable] = ()) -> List[str]:
    if entry.missing_policy == "complete_case":
        return []
    return [
        name for name in predictors
        if any(t.missing(name)[rows].any() for t in (table, *others))
    ]


def _fit_values(family: str, X: DesignMatrix, y: np.ndarray, n_levels: int, config: ChainConfig):
    if family in ("linear", "logit_linear"):
        return fit_linear(X, y)
    if family == "logistic":
        return fit_logistic(X, y, config.tol, config.max_iter)
    return fit_multinomial(X, y, n_levels, config.tol, config.max_iter)


class _EntryFitter:
    """Fits one entry on one or more (replicate) tables."""

    def __init__(self, tables: Sequence[PopulationTable], config: ChainConfig, index: int, rows: np.ndarray):
        self.tables = tuple(tables)
        self.base = self.tables[0]
        self.config = config
        self.entry = config.entries[index]
        self.spec = self.base.schema[self.entry.dependent]
        self.rows = rows
        predictors = config.predictors_for(index)
        self.strata_predictors = [v for v in predictors if v not in self.entry.stratifiers]
        self.pooled_predictors = predictors + [s for s in self.entry.stratifiers if s not in predictors]
        self.zscore = _zscore_map(self.base, config, self.entry, self.pooled_predictors)
        self.response_zscore = _response_zscore(self.base, config, self.entry)
        self.missing_vars = _missing_vars(self.base, rows, self.entry, self.pooled_predictors, self.tables[1:])
        self.n_levels = len(self.spec.levels) if self.spec.is_categorical else 0
        self.log: List[Dict] = []

    def fit_group(self, key: StratumKey, rows: np.ndarray, predictors: Sequence[str]) -> Tuple[Optional[Equation], str]:
        """Equation for ``rows`` or (None, fallback reason)."""
        entry, config = self.entry, self.config
        n = int(rows.size)
        if self.n_levels:
            observed = np.bincount(self.base.values(entry.dependent)[rows], minlength=self.n_levels)
            if np.any(observed == 0):
                return None, FALLBACK_ABSENT_LEVEL
        descriptors, splines = plan_columns(self.base, rows, config, entry, predictors, self.missing_vars)
        values = [encode(t, rows, descriptors, splines, self.zscore) for t in self.tables]
        kept = sorted(set.intersection(*(set(independent_columns(v)) for v in values)))
        if n < len(kept) + 2:
            return None, FALLBACK_SMALL
        if n < config.min_count:
            return None, FALLBACK_MIN_COUNT
        kept_set = set(kept)
        retained = tuple(descriptors[i] for i in kept)
        dropped = tuple(d for i, d in enumerate(descriptors) if i not in kept_set)
        try:
            fits = [
                _fit_values(entry.family, DesignMatrix(v[:, kept], retained),
                            _response(t, rows, entry, self.response_zscore), self.n_levels, config)
                for t, v in zip(self.tables, values)
            ]
        except NumericError as e:
            logger.warning("'%s' stratum %s: %s", entry.dependent, stratum_label(key), e.detail)
            return None, f"{FALLBACK_NUMERIC}: {e.detail}"

        first = fits[0]
        coefficients = np.asarray(first.coefficients)
        covariance = first.covariance
        sigma = getattr(first, "sigma", None)
        if len(fits) > 1:
            flat, covariance = pool_rubin(
                [np.asarray(f.coefficients).ravel() for f in fits], [f.covariance for f in fits]
            )
            coefficients = flat.reshape(coefficients.shape)
            if sigma is not None:
                sigma = float(np.sqrt(np.mean([f.sigma ** 2 for f in fits])))
        used = {d.variable for d in retained if d.kind == "spline"}
        equation = Equation(
            stratum=key,
            family=entry.family,
            n=n,
            descriptors=first.descriptors,
            coefficients=coefficients,
            covariance=covariance if config.export_covariance else None,
            sigma=sigma,
            levels=self.spec.levels,
            splines={name: spline.knots for name, spline in splines.items() if name in used},
            dropped=dropped + tuple(first.dropped),
            converged=all(getattr(f, "converged", True) for f in fits),
            iterations=max(getattr(f, "iterations", 0) for f in fits),
            ridge=max(getattr(f, "ridge", 0.0) for f in fits),
            replicates=len(fits),
        )
        return equation, ""

    def record(self, equation: Optional[Equation], key: StratumKey, n: int, reason: str) -> None:
        self.log.append({
            "stage": "fit",
            "entry": self.entry.dependent,
            "stratum": stratum_label(key),
            "n": n,
            "k": 0 if equation is None else len(equation.descriptors),
            "fallback": equation is None,
            "reason": reason,
            "converged": None if equation is None else equation.converged,
            "iterations": None if equation is None else equation.iterations,
            "ridge": None if equation is None else equation.ridge,
            "dropped": [] if equation is None else [d.label for d in equation.dropped],
        })

    def fit(self, threads: int = 1) -> EntryFit:
        entry = self.entry
        groups = _stratum_groups(self.base, self.rows, entry.stratifiers)

        def run(group):
            key, rows = group
            return self.fit_group(key, rows, self.strata_predictors)

        if threads > 1 and len(groups) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(run, groups))
        else:
            results = [run(group) for group in groups]

        if not entry.stratifiers:
            equation, reason = results[0]
            self.record(equation, (), int(self.rows.size), reason)
            if equation is None:
                raise NumericError(f"Entry '{entry.dependent}' could not be fitted ({reason})")
            return self._entry_fit((equation,), None)

        strata: List[Equation] = []
        pooled = None
        needs_pool = any(equation is None for equation, _ in results)
        if needs_pool:
            pooled, reason = self.fit_group((), self.rows, self.pooled_predictors)
            self.record(pooled, (), int(self.rows.size), reason)
            if pooled is None:
                if reason == FALLBACK_MIN_COUNT:
                    raise DisclosureError(f"Entry '{entry.dependent}' has only {self.rows.size} usable records")
                raise NumericError(f"Pooled fallback for '{entry.dependent}' failed ({reason})")
        for (key, rows), (equation, reason) in zip(groups, results):
            if equation is None:
                equation = Equation(stratum=key, family=entry.family, n=int(rows.size), levels=self.spec.levels,
                                    fallback=True, fallback_reason=reason)
                self.record(None, key, int(rows.size), reason)
            else:
                self.record(equation, key, int(rows.size), "")
            strata.append(equation)
        fallbacks = sum(1 for eq in strata if eq.fallback)
        if fallbacks:
            logger.info("'%s': %d of %d strata use the pooled fit", entry.dependent, fallbacks, len(strata))
        return self._entry_fit(tuple(strata), pooled)

    def _entry_fit(self, strata: Tuple[Equation, ...], pooled: Optional[Equation]) -> EntryFit:
        return EntryFit(
            dependent=self.entry.dependent,
            family=self.entry.family,
            strata=strata,
            pooled=pooled,
            stratifiers=tuple(self.entry.stratifiers),
            zscore=self.zscore,
            response_zscore=self.response_zscore,
        )


def _tables_for(data: FitData, entry: ModelSpecEntry) -> Tuple[PopulationTable, ...]:
    if isinstance(data, ImputationSet):
        if entry.missing_policy == "imputed_replicates":
            return data.replicates
        return (data.base,)
    return (data,)


def fit_entry(data: FitData, config: ChainConfig, index: int, rows: np.ndarray = None,
              threads: int = 1, log: List[Dict] = None) -> EntryFit:
    """Fit entry ``index`` of the chain, optionally on a subset of row indices."""
    entry = config.entries[index]
    tables = _tables_for(data, entry)
    mask = entry_mask(tables[0], config, index)
    if rows is not None:
        subset = np.zeros_like(mask)
        subset[np.asarray(rows)] = True
        mask &= subset
    selected = np.flatnonzero(mask)
    if selected.size == 0:
        raise ValidationError(f"No usable rows for '{entry.dependent}'")
    fitter = _EntryFitter(tables, config, index, selected)
    fitted = fitter.fit(threads)
    if log is not None:
        log.extend(fitter.log)
    return fitted


def fit_chain(data: FitData, config: ChainConfig = None, policy: str = "keep_flagged", threads: int = 1,
              log: List[Dict] = None) -> ModelPack:
    """Fit every entry in order and assemble the model pack."""
    config = config or default_chain()
    source = data.base if isinstance(data, ImputationSet) else data
    config.validate(source.schema)
    if source.n < config.min_count:
        raise DisclosureError(f"Source population has {source.n} records, below the minimum of {config.min_count}")
    imputed = [e for e in config.entries if e.missing_policy == "imputed_replicates"]
    if imputed and not isinstance(data, ImputationSet):
        filters = {e.dependent: e.population_filter for e in config.entries if e.population_filter is not None}
        data = hot_deck_impute(source, config.imputation_scope, config.imputation_replicates,
                               config.imputation_seed, filters)

    entries = []
    for index, entry in enumerate(config.entries):
        logger.info("Fitting %d/%d: %s (%s)", index + 1, len(config.entries), entry.dependent, entry.family)
        entries.append(fit_entry(data, config, index, threads=threads, log=log))
    strata = export_seed_strata(source, config.min_count, policy)
    return ModelPack(source.schema, config, strata, tuple(entries))


def entry_linear_predictor(fitted: EntryFit, table: PopulationTable,
                           rows: np.ndarray = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Linear predictor of ``fitted`` for ``rows`` (all rows by default): (n,) or
    (n, J-1) for multinomial entries, plus the residual sd per row (0 when not linear).
    """
    rows = np.arange(table.n) if rows is None else np.asarray(rows)
    groups, keys = stratum_keys(table, rows, fitted.stratifiers)
    sigma = np.zeros(rows.size)
    eta = None
    for g, key in enumerate(keys):
        members = np.flatnonzero(groups == g)
        equation = fitted.equation_for(key)
        splines = {name: SplineDef(knots) for name, knots in equation.splines.items()}
        values = encode(table, rows[members], equation.descriptors, splines, fitted.zscore)
        part = linear_predictor(equation, values)
        if eta is None:
            eta = np.zeros((rows.size,) + part.shape[1:])
        eta[members] = part
        sigma[members] = equation.sigma or 0.0
    if eta is None:
        width = len(fitted.pooled.levels if fitted.pooled else fitted.strata[0].levels) - 1
        eta = np.zeros((0, width)) if fitted.family == "multinomial" else np.zeros(0)
    return eta, sigma


def predict_entry(fitted: EntryFit, table: PopulationTable, rows: np.ndarray = None) -> np.ndarray:
    """Expected outcome on the model scale: mean, P(level 1) or an (n, J) probability matrix."""
    eta, _ = entry_linear_predictor(fitted, table, rows)
    if fitted.family in ("linear", "logit_linear"):
        return eta
    if fitted.family == "logistic":
        return expit(eta)
    return softmax(np.column_stack([np.zeros(eta.shape[0]), eta]), axis=1)


@dataclass
class CVReport:
    dependent: str
    metric: str
    folds: int
    fold_scores: List[float] = field(default_factory=list)
    fold_sizes: List[int] = field(default_factory=list)
    skipped: List[Tuple[int, str]] = field(default_factory=list)

    @property
    def mean(self) -> float:
        if not self.fold_scores:
            return float("nan")
        return float(np.average(self.fold_scores, weights=self.fold_sizes))

    @property
    def sd(self) -> float:
        """Sample standard deviation of the fold scores."""
        if len(self.fold_scores) < 2:
            return float("nan")
        return float(np.std(self.fold_scores, ddof=1))

    def to_dict(self) -> Dict:
        return {
            "dependent": self.dependent,
            "metric": self.metric,
            "folds": self.folds,
            "fold_scores": list(self.fold_scores),
            "fold_sizes": list(self.fold_sizes),
            "skipped": [{"fold": f, "reason": r} for f, r in self.skipped],
            "mean": None if not self.fold_scores else self.mean,
            "sd": None if len(self.fold_scores) < 2 else self.sd,
        }


def crossvalidate(data: FitData, config: ChainConfig, dependent: str, folds: int = 10, seed: int = 0) -> CVReport:
    """
    k-fold cross-validation of one entry: RMSE on the model scale for linear
    families, mean log-loss otherwise. Folds whose training part loses an
    outcome level, or whose fit fails, are skipped and reported.
    """
    if folds < 2:
        raise ConfigError("Cross-validation needs at least 2 folds")
    index = config.index_of(dependent)
    entry = config.entries[index]
    table = _tables_for(data, entry)[0]
    rows = np.flatnonzero(entry_mask(table, config, index))
    if rows.size < folds:
        raise ValidationError(f"'{dependent}' has {rows.size} usable rows, fewer than {folds} folds")
    order = np.random.default_rng(seed).permutation(rows)
    fold_of = np.arange(order.size) % folds
    spec = table.schema[dependent]
    metric = "rmse" if entry.family in ("linear", "logit_linear") else "log_loss"
    report = CVReport(dependent, metric, folds)

    for f in range(folds):
        test = np.sort(order[fold_of == f])
        train = np.sort(order[fold_of != f])
        if spec.is_categorical:
            seen = np.unique(table.values(dependent)[train])
            if seen.size < np.unique(table.values(dependent)[rows]).size:
                report.skipped.append((f, "training folds lose an outcome level"))
                continue
        try:
            fitted = fit_entry(data, config, index, rows=train)
            predicted = predict_entry(fitted, table, test)
        except SynthPopError as e:
            report.skipped.append((f, e.detail))
            continue
        y = _response(table, test, entry, fitted.response_zscore)
        if metric == "rmse":
            score = float(np.sqrt(np.mean((y - predicted) ** 2)))
        elif entry.family == "logistic":
            p = np.clip(predicted, 1e-15, 1 - 1e-15)
            score = float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))
        else:
            p = np.clip(predicted[np.arange(test.size), y], 1e-15, 1.0)
            score = float(-np.mean(np.log(p)))
        report.fold_scores.append(score)
        report.fold_sizes.append(int(test.size))
    logger.info("Cross-validation of '%s': %s %.6g ± %.3g over %d folds (%d skipped)",
                dependent, metric, report.mean, report.sd, len(report.fold_scores), len(report.skipped))
    return report
