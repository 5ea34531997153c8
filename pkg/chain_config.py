"""
Chain configuration: the ordered model specifications, their JSON form, and
the built-in schema/chain describing the sixteen-model population chain.
"""
import json
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigError, SchemaError
from schema_core import PopulationSchema, PopulationTable, VariableSpec
from spline_glm import AGE_KNOTS, DEFAULT_MAX_ITER, DEFAULT_TOL, ZSCORE_KNOTS, SplineDef

FAMILIES = ("linear", "logistic", "multinomial", "logit_linear")
MISSING_POLICIES = ("complete_case", "missing_indicator", "imputed_replicates")
TRANSFORM_KINDS = ("spline", "zscore_spline", "zscore", "raw", "factor")
FILTER_OPS = {
    ">": np.greater,
    ">=": np.greater_equal,
    "<": np.less,
    "<=": np.less_equal,
    "==": np.equal,
    "!=": np.not_equal,
}

INCOME_SOURCES = (
    "employee", "civil_servant", "company_director", "other_labour", "company_owner",
    "property_income", "unemployment", "disability", "retirement", "social_assistance",
    "other_social_security", "study_grant", "other", "no_income",
)
HOUSEHOLD_TYPES = ("non_institutional", "institutional")
HOUSEHOLD_SIZES = ("1", "2", "3", "4", "5", "6+")
ETHNIC_GROUPS = (
    "dutch", "moroccan", "turkish", "surinamese", "antillean", "other_non_western", "other_western",
)
EDUCATION_LEVELS = ("primary", "lower_secondary", "higher_secondary", "lower_tertiary", "higher_tertiary")
SMOKING_LEVELS = ("never", "former", "current", "heavy")
NO_YES = ("no", "yes")


@dataclass(frozen=True)
class PopulationFilter:
    """Row predicate such as ``age > 18``; rows with the variable missing never pass."""

    variable: str
    op: str
    value: object

    def __post_init__(self):
        if self.op not in FILTER_OPS:
            raise ConfigError(f"Unknown filter operator '{self.op}'")

    def mask(self, table: PopulationTable) -> np.ndarray:
        spec = table.schema[self.variable]
        column = table.column(self.variable)
        if spec.is_categorical:
            if self.op not in ("==", "!="):
                raise ConfigError(f"Filter on categorical '{self.variable}' must use == or !=")
            target = spec.level_code(str(self.value))
            result = FILTER_OPS[self.op](column.values, target)
        else:
            result = FILTER_OPS[self.op](np.nan_to_num(column.values), float(self.value))
        return result & ~column.missing

    def describe(self) -> str:
        return f"{self.variable} {self.op} {self.value}"

    def to_dict(self) -> Dict:
        return {"variable": self.variable, "op": self.op, "value": self.value}

    @classmethod
    def from_dict(cls, payload: Mapping) -> "PopulationFilter":
        return cls(payload["variable"], payload["op"], payload["value"])


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    knots: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ConfigError(f"Unknown transform '{self.kind}'")
        if self.knots is not None:
            object.__setattr__(self, "knots", tuple(float(k) for k in self.knots))
            SplineDef(self.knots)

    def to_dict(self) -> Dict:
        payload = {"kind": self.kind}
        if self.knots is not None:
            payload["knots"] = list(self.knots)
        return payload

    @classmethod
    def from_dict(cls, payload: Mapping) -> "TransformSpec":
        return cls(payload["kind"], payload.get("knots"))


@dataclass(frozen=True)
class ModelSpecEntry:
    dependent: str
    family: str
    stratifiers: Tuple[str, ...] = ()
    predictors: Optional[Tuple[str, ...]] = None
    exclude: Tuple[str, ...] = ()
    transforms: Mapping[str, TransformSpec] = field(default_factory=dict)
    population_filter: Optional[PopulationFilter] = None
    require_observed: Tuple[str, ...] = ()
    missing_policy: str = "complete_case"
    levels: Optional[Tuple[str, ...]] = None
    note: str = ""

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"Entry '{self.dependent}': unknown family '{self.family}'")
        if self.missing_policy not in MISSING_POLICIES:
            raise ConfigError(f"Entry '{self.dependent}': unknown missing policy '{self.missing_policy}'")
        object.__setattr__(self, "stratifiers", tuple(self.stratifiers))
        object.__setattr__(self, "exclude", tuple(self.exclude))
        object.__setattr__(self, "require_observed", tuple(self.require_observed))
        if self.predictors is not None:
            object.__setattr__(self, "predictors", tuple(self.predictors))
        if self.levels is not None:
            object.__setattr__(self, "levels", tuple(self.levels))
        object.__setattr__(self, "transforms", dict(self.transforms))

    def to_dict(self) -> Dict:
        return {
            "dependent": self.dependent,
            "family": self.family,
            "stratifiers": list(self.stratifiers),
            "predictors": None if self.predictors is None else list(self.predictors),
            "exclude": list(self.exclude),
            "transforms": {name: t.to_dict() for name, t in sorted(self.transforms.items())},
            "population_filter": None if self.population_filter is None else self.population_filter.to_dict(),
            "require_observed": list(self.require_observed),
            "missing_policy": self.missing_policy,
            "levels": None if self.levels is None else list(self.levels),
            "note": self.note,
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "ModelSpecEntry":
        known = {
            "dependent", "family", "stratifiers", "predictors", "exclude", "transforms",
            "population_filter", "require_observed", "missing_policy", "levels", "note",
        }
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ConfigError(f"Entry '{payload.get('dependent')}': unknown fields {unknown}")
        try:
            pf = payload.get("population_filter")
            return cls(
                dependent=payload["dependent"],
                family=payload["family"],
                stratifiers=tuple(payload.get("stratifiers", ())),
                predictors=payload.get("predictors"),
                exclude=tuple(payload.get("exclude", ())),
                transforms={k: TransformSpec.from_dict(v) for k, v in payload.get("transforms", {}).items()},
                population_filter=None if pf is None else PopulationFilter.from_dict(pf),
                require_observed=tuple(payload.get("require_observed", ())),
                missing_policy=payload.get("missing_policy", "complete_case"),
                levels=payload.get("levels"),
                note=payload.get("note", ""),
            )
        except KeyError as e:
            raise ConfigError(f"Chain entry is missing field {e}")


@dataclass(frozen=True)
class ChainConfig:
    entries: Tuple[ModelSpecEntry, ...]
    seed_names: Tuple[str, ...] = ("age", "gender", "region", "urbanity")
    age_spline: SplineDef = SplineDef(AGE_KNOTS)
    zscore_spline: SplineDef = SplineDef(ZSCORE_KNOTS)
    min_count: int = 10
    imputation_replicates: int = 5
    imputation_seed: int = 20121231
    imputation_scope: Tuple[str, ...] = ()
    zscore_moments: Mapping[str, Tuple[float, float]] = field(default_factory=dict)
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    export_covariance: bool = True

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "seed_names", tuple(self.seed_names))
        object.__setattr__(self, "imputation_scope", tuple(self.imputation_scope))
        object.__setattr__(
            self, "zscore_moments",
            {k: (float(v[0]), float(v[1])) for k, v in dict(self.zscore_moments).items()},
        )
        dependents = [e.dependent for e in self.entries]
        duplicates = sorted({d for d in dependents if dependents.count(d) > 1})
        if duplicates:
            raise ConfigError(f"Variables modeled more than once: {duplicates}")
        if self.min_count < 1:
            raise ConfigError("Disclosure minimum count must be at least 1")
        if self.imputation_replicates < 2:
            raise ConfigError("At least 2 imputation replicates are required")

    @property
    def dependents(self) -> List[str]:
        return [e.dependent for e in self.entries]

    def index_of(self, dependent: str) -> int:
        try:
            return self.dependents.index(dependent)
        except ValueError:
            raise ConfigError(f"'{dependent}' is not modeled by the chain")

    def available_before(self, index: int) -> List[str]:
        return list(self.seed_names) + self.dependents[:index]

    def predictors_for(self, index: int) -> List[str]:
        """Seed variables plus earlier dependents (or the explicit list), minus exclusions."""
        entry = self.entries[index]
        base = list(entry.predictors) if entry.predictors is not None else self.available_before(index)
        return [v for v in base if v not in entry.exclude and v != entry.dependent]

    def validate(self, schema: PopulationSchema) -> None:
        if tuple(schema.seed_names) != self.seed_names:
            raise ConfigError(f"Chain seed variables {list(self.seed_names)} do not match schema "
                              f"seed variables {list(schema.seed_names)}")
        for index, entry in enumerate(self.entries):
            where = f"Entry {index + 1} ('{entry.dependent}')"
            if entry.dependent not in schema:
                raise ConfigError(f"{where}: dependent is not in the schema")
            if entry.dependent in self.seed_names:
                raise ConfigError(f"{where}: seed variables are copied, never modeled")
            spec = schema[entry.dependent]
            _check_family(where, entry, spec)
            available = set(self.available_before(index))
            for name in self.predictors_for(index):
                if name not in schema:
                    raise ConfigError(f"{where}: predictor '{name}' is not in the schema")
                if name not in available:
                    raise ConfigError(f"{where}: predictor '{name}' is not a seed variable or modeled earlier")
            for name in entry.stratifiers:
                if name not in available:
                    raise ConfigError(f"{where}: stratifier '{name}' is not a seed variable or modeled earlier")
                if not schema[name].is_categorical:
                    raise ConfigError(f"{where}: stratifier '{name}' must be categorical")
            for name in entry.require_observed:
                if name not in available:
                    raise ConfigError(f"{where}: required variable '{name}' is not available")
            if entry.population_filter is not None and entry.population_filter.variable not in available:
                raise ConfigError(f"{where}: filter variable '{entry.population_filter.variable}' is not available")
            for name, transform in entry.transforms.items():
                if name not in self.predictors_for(index) and name != entry.dependent:
                    raise ConfigError(f"{where}: transform for '{name}' which is not a predictor")
                if transform.kind == "factor" and not (schema[name].kind == "continuous" and schema[name].integer):
                    raise ConfigError(f"{where}: factor transform needs an integer variable, '{name}' is not")
        for name in self.imputation_scope:
            if name not in schema:
                raise ConfigError(f"Imputation scope variable '{name}' is not in the schema")

    def restricted_to(self, names: Sequence[str]) -> "ChainConfig":
        """Chain keeping only entries whose dependent is in ``names``."""
        keep = set(names) | set(self.seed_names)
        entries = []
        for entry in self.entries:
            if entry.dependent not in keep:
                continue
            entries.append(replace(
                entry,
                stratifiers=tuple(v for v in entry.stratifiers if v in keep),
                predictors=None if entry.predictors is None else tuple(v for v in entry.predictors if v in keep),
                exclude=tuple(v for v in entry.exclude if v in keep),
                transforms={k: v for k, v in entry.transforms.items() if k in keep},
                require_observed=tuple(v for v in entry.require_observed if v in keep),
                population_filter=(entry.population_filter
                                   if entry.population_filter is None or entry.population_filter.variable in keep
                                   else None),
            ))
        return replace(
            self,
            entries=tuple(entries),
            imputation_scope=tuple(v for v in self.imputation_scope if v in keep),
        )

    def to_dict(self) -> Dict:
        return {
            "entries": [e.to_dict() for e in self.entries],
            "seed_names": list(self.seed_names),
            "age_spline": list(self.age_spline.knots),
            "zscore_spline": list(self.zscore_spline.knots),
            "min_count": self.min_count,
            "imputation_replicates": self.imputation_replicates,
            "imputation_seed": self.imputation_seed,
            "imputation_scope": list(self.imputation_scope),
            "zscore_moments": {k: list(v) for k, v in sorted(self.zscore_moments.items())},
            "tol": self.tol,
            "max_iter": self.max_iter,
            "export_covariance": self.export_covariance,
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "ChainConfig":
        known = {
            "entries", "seed_names", "age_spline", "zscore_spline", "min_count", "imputation_replicates",
            "imputation_seed", "imputation_scope", "zscore_moments", "tol", "max_iter", "export_covariance",
        }
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ConfigError(f"Chain config has unknown fields {unknown}")
        if "entries" not in payload:
            raise ConfigError("Chain config has no 'entries'")
        defaults = cls(entries=())
        try:
            return cls(
                entries=tuple(ModelSpecEntry.from_dict(e) for e in payload["entries"]),
                seed_names=tuple(payload.get("seed_names", defaults.seed_names)),
                age_spline=SplineDef(payload.get("age_spline", defaults.age_spline.knots)),
                zscore_spline=SplineDef(payload.get("zscore_spline", defaults.zscore_spline.knots)),
                min_count=int(payload.get("min_count", defaults.min_count)),
                imputation_replicates=int(payload.get("imputation_replicates", defaults.imputation_replicates)),
                imputation_seed=int(payload.get("imputation_seed", defaults.imputation_seed)),
                imputation_scope=tuple(payload.get("imputation_scope", ())),
                zscore_moments=payload.get("zscore_moments", {}),
                tol=float(payload.get("tol", defaults.tol)),
                max_iter=int(payload.get("max_iter", defaults.max_iter)),
                export_covariance=bool(payload.get("export_covariance", True)),
            )
        except SchemaError as e:
            raise ConfigError(f"Invalid spline definition in chain config: {e.detail}")

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def load(cls, path: str) -> "ChainConfig":
        try:
            with open(path, "r", encoding="utf-8") as f:
                return cls.from_dict(json.load(f))
        except FileNotFoundError:
            raise ConfigError(f"Chain config not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"Chain config {path} is not valid JSON: {e}")


def _check_family(where: str, entry: ModelSpecEntry, spec: VariableSpec) -> None:
    if entry.family == "multinomial" and not spec.is_categorical:
        raise ConfigError(f"{where}: multinomial family needs a categorical dependent")
    if entry.family == "logistic" and not (spec.is_categorical and len(spec.levels) == 2):
        raise ConfigError(f"{where}: logistic family needs a two-level categorical dependent")
    if entry.family == "linear" and spec.kind not in ("continuous", "percentile"):
        raise ConfigError(f"{where}: linear family needs a continuous or percentile dependent")
    if entry.family == "logit_linear" and spec.kind != "probability":
        raise ConfigError(f"{where}: logit_linear family needs a probability dependent")
    if entry.levels is not None and tuple(entry.levels) != tuple(spec.levels):
        raise ConfigError(f"{where}: levels {list(entry.levels)} differ from schema levels {list(spec.levels)}")


def default_schema(n_regions: int = 40, n_urbanity: int = 5) -> PopulationSchema:
    """The twenty variables of the population chain, in their modelling order."""
    survey = "survey"
    variables = (
        VariableSpec.categorical("region", [f"R{i:02d}" for i in range(1, n_regions + 1)]),
        VariableSpec.categorical("urbanity", [str(i) for i in range(1, n_urbanity + 1)]),
        VariableSpec.categorical("gender", ["male", "female"]),
        VariableSpec.continuous("age", min=0, integer=True),
        VariableSpec.categorical("income_source", INCOME_SOURCES),
        VariableSpec.percentile("income_pct"),
        VariableSpec.percentile("capital_pct"),
        VariableSpec.categorical("household_type", HOUSEHOLD_TYPES),
        VariableSpec.categorical("household_size", HOUSEHOLD_SIZES),
        VariableSpec.categorical("ethnic_group", ETHNIC_GROUPS),
        VariableSpec.categorical("education", EDUCATION_LEVELS),
        VariableSpec.categorical("smoking", SMOKING_LEVELS, source_tag=survey),
        VariableSpec.continuous("bmi", min=10, max=70, source_tag=survey),
        VariableSpec.categorical("physical_activity", NO_YES, source_tag=survey),
        VariableSpec.categorical("pancreas_cancer", NO_YES),
        VariableSpec.categorical("lung_cancer", NO_YES),
        VariableSpec.probability("chd"),
        VariableSpec.probability("stroke"),
        VariableSpec.probability("diabetes"),
        VariableSpec.probability("copd"),
    )
    return PopulationSchema(variables, ("age", "gender", "region", "urbanity"))


def default_chain() -> ChainConfig:
    """Sixteen-model chain: registry variables, lifestyle survey variables, cancers, diseases."""
    by_gender = ("gender",)
    age_factor = {"age": TransformSpec("factor")}
    adults = PopulationFilter("age", ">", 18)
    entries = (
        ModelSpecEntry("income_source", "multinomial", stratifiers=("gender", "region"),
                       levels=INCOME_SOURCES),
        ModelSpecEntry("income_pct", "linear", stratifiers=by_gender),
        ModelSpecEntry("capital_pct", "linear", stratifiers=by_gender),
        ModelSpecEntry("household_type", "multinomial", stratifiers=by_gender, levels=HOUSEHOLD_TYPES,
                       note="household_size is modeled later, so it is not a predictor here"),
        ModelSpecEntry("household_size", "multinomial", stratifiers=("gender", "household_type"),
                       levels=HOUSEHOLD_SIZES),
        ModelSpecEntry("ethnic_group", "multinomial", stratifiers=("gender", "household_type"),
                       levels=ETHNIC_GROUPS),
        ModelSpecEntry("education", "multinomial", stratifiers=by_gender, levels=EDUCATION_LEVELS,
                       missing_policy="imputed_replicates"),
        ModelSpecEntry("smoking", "multinomial", stratifiers=by_gender, levels=SMOKING_LEVELS,
                       missing_policy="imputed_replicates"),
        ModelSpecEntry("bmi", "linear", stratifiers=by_gender, population_filter=adults,
                       missing_policy="imputed_replicates"),
        ModelSpecEntry("physical_activity", "multinomial", stratifiers=by_gender, levels=NO_YES,
                       missing_policy="imputed_replicates"),
        ModelSpecEntry("pancreas_cancer", "logistic", stratifiers=by_gender, missing_policy="missing_indicator"),
        ModelSpecEntry("lung_cancer", "logistic", stratifiers=by_gender, missing_policy="missing_indicator"),
        ModelSpecEntry("chd", "logit_linear", stratifiers=by_gender, transforms=age_factor,
                       require_observed=("smoking",), missing_policy="missing_indicator"),
        ModelSpecEntry("stroke", "logit_linear", stratifiers=by_gender, transforms=age_factor,
                       require_observed=("smoking",), missing_policy="missing_indicator"),
        ModelSpecEntry("diabetes", "logit_linear", stratifiers=by_gender, transforms=age_factor,
                       require_observed=("smoking",), missing_policy="missing_indicator"),
        ModelSpecEntry("copd", "logit_linear", stratifiers=by_gender, transforms=age_factor,
                       require_observed=("smoking",), missing_policy="missing_indicator"),
    )
    return ChainConfig(entries=entries, imputation_scope=("education", "smoking", "bmi", "physical_activity"))
