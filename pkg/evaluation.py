"""
Utility evaluation: compares a synthetic population with its source through
frequency tables, the first four moments and stratified means/prevalences
with normal-approximation confidence intervals.
"""
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from errors import SchemaError, ValidationError
from schema_core import PopulationTable, recode_age_class_array

logger = logging.getLogger(__name__)

Z_95 = 1.96
ADULT_AGE = 18


@dataclass(frozen=True)
class MomentsSummary:
    n: int
    mean: float
    sd: float
    skewness: Optional[float]
    kurtosis: Optional[float]

    def to_dict(self) -> Dict:
        return {"n": self.n, "mean": self.mean, "sd": self.sd, "skewness": self.skewness, "kurtosis": self.kurtosis}


def moments(values) -> MomentsSummary:
    """Mean, sample sd, skewness and excess kurtosis of the finite values; shape moments are None when sd is 0."""
    values = np.asarray(values, dtype=np.float64)
    values = values[np.isfinite(values)]
    if values.size < 2:
        raise ValidationError(f"Moments need at least 2 observed values, got {values.size}")
    sd = float(values.std(ddof=1))
    if sd == 0.0:
        return MomentsSummary(int(values.size), float(values.mean()), 0.0, None, None)
    return MomentsSummary(
        n=int(values.size),
        mean=float(values.mean()),
        sd=sd,
        skewness=float(stats.skew(values, bias=True)),
        kurtosis=float(stats.kurtosis(values, fisher=True, bias=True)),
    )


@dataclass(frozen=True)
class FrequencyTable:
    levels: Tuple[str, ...]
    counts: Tuple[int, ...]
    missing: int

    @property
    def n(self) -> int:
        return int(sum(self.counts))

    @property
    def percents(self) -> Tuple[float, ...]:
        return tuple(100.0 * c / self.n for c in self.counts)

    def rows(self) -> List[Tuple[str, float]]:
        return list(zip(self.levels, self.percents))


def frequency_table(codes, levels: Sequence[str]) -> FrequencyTable:
    """Percent per level over the non-missing codes (-1 is missing); absent levels get 0."""
    codes = np.asarray(codes, dtype=np.int64)
    observed = codes[codes >= 0]
    if observed.size == 0:
        raise ValidationError("Frequency table of an all-missing column")
    counts = np.bincount(observed, minlength=len(levels))
    return FrequencyTable(tuple(levels), tuple(int(c) for c in counts), int(codes.size - observed.size))


@dataclass(frozen=True)
class StratumEstimate:
    target: str
    stratum_key: str
    population: str
    n: int
    estimate: float
    ci_low: Optional[float]
    ci_high: Optional[float]


@dataclass
class StratifiedComparison:
    target: str
    strata_vars: Tuple[str, ...]
    populations: Tuple[str, str]
    rows: List[StratumEstimate] = field(default_factory=list)

    def differences(self) -> Dict[Tuple[str, str], float]:
        """(target, stratum) -> estimate B minus estimate A, for strata present in both populations."""
        first, second = self.populations
        a = {(r.target, r.stratum_key): r.estimate for r in self.rows if r.population == first}
        b = {(r.target, r.stratum_key): r.estimate for r in self.rows if r.population == second}
        return {key: b[key] - a[key] for key in a if key in b}

    @property
    def max_abs_difference(self) -> float:
        diffs = self.differences()
        return max((abs(d) for d in diffs.values()), default=0.0)


def _stratum_labels(table: PopulationTable, strata_vars: Sequence[str]) -> Tuple[np.ndarray, np.ndarray]:
    """Stratum label per record and a mask of records whose strata values are all present."""
    schema = table.schema
    parts = []
    present = np.ones(table.n, dtype=bool)
    for name in strata_vars:
        spec = schema[name]
        if name == schema.age_name:
            ages = table.values(name)
            classes = recode_age_class_array(np.clip(np.nan_to_num(ages), 0, 105))
            parts.append(np.char.add(f"{name}_class=", classes.astype(str)))
            present &= ~table.missing(name)
        elif spec.is_categorical:
            labels = table.labels(name)
            present &= ~table.missing(name)
            parts.append(np.char.add(f"{name}=", np.where(labels == None, "", labels).astype(str)))  # noqa: E711
        else:
            raise SchemaError(f"Stratum variable '{name}' must be categorical or the age variable")
    if not parts:
        return np.full(table.n, "*", dtype=object), present
    label = parts[0]
    for part in parts[1:]:
        label = np.char.add(np.char.add(label, "|"), part)
    return label.astype(object), present


def _estimates(table: PopulationTable, population: str, target: str, strata_vars: Sequence[str],
               level: Optional[str]) -> List[StratumEstimate]:
    spec = table.schema[target]
    labels, present = _stratum_labels(table, strata_vars)
    present &= ~table.missing(target)
    if spec.is_categorical:
        y = (table.values(target) == spec.level_code(level)).astype(np.float64)
        name = f"{target}={level}"
    else:
        y = table.values(target)
        name = target
    frame = pd.DataFrame({"stratum": labels[present], "y": y[present]})
    grouped = frame.groupby("stratum", sort=True)["y"].agg(["size", "mean", "std"])
    rows = []
    for key, record in grouped.iterrows():
        n = int(record["size"])
        estimate = float(record["mean"])
        if n < 2:
            rows.append(StratumEstimate(name, key, population, n, estimate, None, None))
            continue
        if spec.is_categorical:
            se = float(np.sqrt(estimate * (1.0 - estimate) / n))
        else:
            se = float(record["std"]) / np.sqrt(n)
        rows.append(StratumEstimate(name, key, population, n, estimate, estimate - Z_95 * se, estimate + Z_95 * se))
    return rows


def stratified_compare(pop_a: PopulationTable, pop_b: PopulationTable, target: str, strata_vars: Sequence[str],
                       level: Optional[str] = None,
                       labels: Tuple[str, str] = ("source", "synthetic")) -> StratifiedComparison:
    """
    Mean (continuous target) or prevalence (categorical target; every level
    when ``level`` is None) per stratum in both populations. The age variable
    is recoded into age classes.
    """
    for table in (pop_a, pop_b):
        for name in (target, *strata_vars):
            if name not in table.schema:
                raise SchemaError(f"Unknown variable '{name}'")
    spec = pop_a.schema[target]
    levels = [level] if level is not None or not spec.is_categorical else list(spec.levels)
    comparison = StratifiedComparison(target, tuple(strata_vars), tuple(labels))
    for lvl in levels:
        for table, population in ((pop_a, labels[0]), (pop_b, labels[1])):
            comparison.rows.extend(_estimates(table, population, target, strata_vars, lvl))
    return comparison


def check_comparable(source: PopulationTable, synthetic: PopulationTable) -> List[str]:
    """Variables shared by both populations; every source variable must be present with the same definition."""
    shared = []
    for spec in source.schema.variables:
        if spec.name not in synthetic.schema:
            raise ValidationError(f"Variable '{spec.name}' is absent from the synthetic population")
        if synthetic.schema[spec.name] != spec:
            raise ValidationError(f"Variable '{spec.name}' is defined differently in the two populations")
        shared.append(spec.name)
    return shared


def frequency_frame(source: PopulationTable, synthetic: PopulationTable, names: Sequence[str],
                    labels: Tuple[str, str]) -> pd.DataFrame:
    records = []
    for name in names:
        spec = source.schema[name]
        if not spec.is_categorical:
            continue
        a = frequency_table(source.values(name), spec.levels) if (~source.missing(name)).any() else None
        b = frequency_table(synthetic.values(name), spec.levels) if (~synthetic.missing(name)).any() else None
        for i, level in enumerate(spec.levels):
            pa = a.percents[i] if a else np.nan
            pb = b.percents[i] if b else np.nan
            records.append({"variable": name, "level": level, labels[0]: pa, labels[1]: pb, "difference": pb - pa})
    return pd.DataFrame(records, columns=["variable", "level", labels[0], labels[1], "difference"])


def moments_frame(source: PopulationTable, synthetic: PopulationTable, names: Sequence[str],
                  labels: Tuple[str, str]) -> pd.DataFrame:
    records = []
    stats_names = ("n", "mean", "sd", "skewness", "kurtosis")
    for name in names:
        if source.schema[name].is_categorical:
            continue
        record = {"variable": name}
        for table, label in ((source, labels[0]), (synthetic, labels[1])):
            values = table.values(name)[~table.missing(name)]
            summary = moments(values).to_dict() if values.size >= 2 else dict.fromkeys(stats_names)
            for stat in stats_names:
                value = summary[stat]
                record[f"{label}_{stat}"] = np.nan if value is None else value
        records.append(record)
    columns = ["variable"] + [f"{label}_{stat}" for label in labels for stat in stats_names]
    return pd.DataFrame(records, columns=columns)


def _adult(table: PopulationTable, adult_age: int) -> PopulationTable:
    return table.take(np.flatnonzero(table.values(table.schema.age_name) > adult_age))


def _relative(a: float, b: float) -> float:
    if not np.isfinite(a) or not np.isfinite(b):
        return float("nan")
    return abs(b - a) / abs(a) if a != 0 else abs(b - a)


def _max_or_none(values) -> Optional[float]:
    values = [v for v in values if v is not None and np.isfinite(v)]
    return max(values) if values else None


@dataclass
class EvaluationReport:
    summary: Dict
    paths: Dict[str, str]
    comparisons: List[StratifiedComparison]


def emit_report(source: PopulationTable, synthetic: PopulationTable, out_dir: str,
                comparisons: Sequence[StratifiedComparison] = (),
                labels: Tuple[str, str] = ("source", "synthetic"),
                adult_age: int = ADULT_AGE) -> EvaluationReport:
    """
    Write the comparison tables (all records and adults only), the long-format
    plot data of the stratified comparisons and a JSON discrepancy summary.
    """
    names = check_comparable(source, synthetic)
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise ValidationError(f"Cannot create report directory {out_dir}: {e}")

    adults_a, adults_b = _adult(source, adult_age), _adult(synthetic, adult_age)
    frames = {
        "frequencies": frequency_frame(source, synthetic, names, labels),
        "moments": moments_frame(source, synthetic, names, labels),
        "frequencies_adults": frequency_frame(adults_a, adults_b, names, labels),
        "moments_adults": moments_frame(adults_a, adults_b, names, labels),
    }
    plot_records = [
        {
            "target": row.target,
            "stratum_vars": "|".join(c.strata_vars),
            "stratum_key": row.stratum_key,
            "population": row.population,
            "n": row.n,
            "estimate": row.estimate,
            "ci_low": row.ci_low,
            "ci_high": row.ci_high,
        }
        for c in comparisons
        for row in c.rows
    ]
    frames["plot_data"] = pd.DataFrame(
        plot_records,
        columns=["target", "stratum_vars", "stratum_key", "population", "n", "estimate", "ci_low", "ci_high"],
    )

    paths = {}
    for key, frame in frames.items():
        path = os.path.join(out_dir, f"{key}.csv")
        try:
            frame.to_csv(path, index=False, encoding="utf-8", lineterminator="\n")
        except OSError as e:
            raise ValidationError(f"Cannot write {path}: {e}")
        paths[key] = path

    freq, mom = frames["frequencies"], frames["moments"]
    a, b = labels
    summary = {
        "populations": list(labels),
        "n": {a: source.n, b: synthetic.n},
        "max_abs_frequency_difference_pp": _max_or_none(freq["difference"].abs().tolist()),
        "max_abs_frequency_difference_pp_adults": _max_or_none(
            frames["frequencies_adults"]["difference"].abs().tolist()),
        "max_relative_mean_difference": _max_or_none(
            [_relative(x, y) for x, y in zip(mom[f"{a}_mean"], mom[f"{b}_mean"])]),
        "max_relative_sd_difference": _max_or_none(
            [_relative(x, y) for x, y in zip(mom[f"{a}_sd"], mom[f"{b}_sd"])]),
        "per_variable_max_frequency_difference_pp": {
            name: float(group["difference"].abs().max())
            for name, group in freq.groupby("variable", sort=False)
            if group["difference"].notna().any()
        },
        "stratified_max_abs_difference": {
            f"{c.target} by {'|'.join(c.strata_vars)}": c.max_abs_difference for c in comparisons
        },
    }
    summary_path = os.path.join(out_dir, "summary.json")
    with open(summary_path, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True, allow_nan=False)
    paths["summary"] = summary_path
    logger.info("Evaluation report written to %s (max frequency difference %s pp)",
                out_dir, summary["max_abs_frequency_difference_pp"])
    return EvaluationReport(summary, paths, list(comparisons))
