"""
Variable schemas, typed columnar population tables and CSV ingestion/emission.

A PopulationTable keeps one numpy array per variable plus a missing mask.
Categorical columns hold integer level codes (-1 where missing), every other
kind holds float64 values (NaN where missing).
"""
import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from errors import SchemaError, ValidationError

logger = logging.getLogger(__name__)

KINDS = ("categorical", "continuous", "percentile", "probability")
SOURCE_TAGS = ("registry", "survey", "derived")
AGE_CLASS_LABELS = ("1", "2", "3", "4", "5", "6", "7", "8")
_AGE_CLASS_EDGES = np.array([20, 30, 40, 50, 60, 70, 80])


@dataclass(frozen=True)
class VariableSpec:
    name: str
    kind: str
    levels: Tuple[str, ...] = ()
    min: Optional[float] = None
    max: Optional[float] = None
    integer: bool = False
    source_tag: str = "registry"

    def __post_init__(self):
        if not self.name or not self.name.replace("_", "").isalnum():
            raise SchemaError(f"Invalid variable name '{self.name}'")
        if self.kind not in KINDS:
            raise SchemaError(f"Variable '{self.name}': unknown kind '{self.kind}'")
        if self.source_tag not in SOURCE_TAGS:
            raise SchemaError(f"Variable '{self.name}': unknown source tag '{self.source_tag}'")
        object.__setattr__(self, "levels", tuple(str(level) for level in self.levels))
        if self.kind == "categorical":
            if not self.levels:
                raise SchemaError(f"Categorical variable '{self.name}' needs at least one level")
            if len(set(self.levels)) != len(self.levels) or any(level == "" for level in self.levels):
                raise SchemaError(f"Categorical variable '{self.name}' has duplicate or empty levels")
        elif self.levels:
            raise SchemaError(f"Variable '{self.name}' of kind {self.kind} cannot have levels")
        if self.min is not None and self.max is not None and self.min > self.max:
            raise SchemaError(f"Variable '{self.name}': min {self.min} exceeds max {self.max}")

    @classmethod
    def categorical(cls, name: str, levels: Sequence[str], source_tag: str = "registry") -> "VariableSpec":
        return cls(name, "categorical", levels=tuple(levels), source_tag=source_tag)

    @classmethod
    def continuous(cls, name: str, min: float = None, max: float = None,
                   integer: bool = False, source_tag: str = "registry") -> "VariableSpec":
        return cls(name, "continuous", min=min, max=max, integer=integer, source_tag=source_tag)

    @classmethod
    def percentile(cls, name: str, source_tag: str = "registry") -> "VariableSpec":
        return cls(name, "percentile", min=1, max=100, integer=True, source_tag=source_tag)

    @classmethod
    def probability(cls, name: str, source_tag: str = "derived") -> "VariableSpec":
        return cls(name, "probability", min=0.0, max=1.0, source_tag=source_tag)

    @property
    def is_categorical(self) -> bool:
        return self.kind == "categorical"

    @property
    def reference_level(self) -> Optional[str]:
        return self.levels[0] if self.levels else None

    @property
    def integer_valued(self) -> bool:
        return self.integer or self.kind == "percentile"

    def level_code(self, label: str) -> int:
        try:
            return self.levels.index(label)
        except ValueError:
            raise SchemaError(f"'{label}' is not a level of '{self.name}' (levels: {list(self.levels)})")

    def first_violation(self, values: np.ndarray, missing: np.ndarray) -> Optional[int]:
        """Index of the first non-missing value breaking this variable's kind constraints."""
        present = ~missing
        if self.is_categorical:
            bad = present & ((values < 0) | (values >= len(self.levels)))
        else:
            bad = present & ~np.isfinite(values)
            if self.min is not None:
                bad |= present & (values < self.min)
            if self.max is not None:
                bad |= present & (values > self.max)
            if self.integer_valued:
                bad |= present & (np.floor(values) != values)
        hits = np.flatnonzero(bad)
        return int(hits[0]) if hits.size else None

    def to_dict(self) -> Dict:
        payload = {"name": self.name, "kind": self.kind, "source_tag": self.source_tag}
        if self.is_categorical:
            payload["levels"] = list(self.levels)
        else:
            payload["min"] = self.min
            payload["max"] = self.max
            payload["integer"] = self.integer
        return payload

    @classmethod
    def from_dict(cls, payload: Mapping) -> "VariableSpec":
        return cls(
            name=payload["name"],
            kind=payload["kind"],
            levels=tuple(payload.get("levels", ())),
            min=payload.get("min"),
            max=payload.get("max"),
            integer=bool(payload.get("integer", False)),
            source_tag=payload.get("source_tag", "registry"),
        )


@dataclass(frozen=True)
class PopulationSchema:
    variables: Tuple[VariableSpec, ...]
    seed_names: Tuple[str, ...] = ("age", "gender", "region", "urbanity")

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "seed_names", tuple(self.seed_names))
        names = [v.name for v in self.variables]
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            raise SchemaError(f"Duplicate variable names: {duplicates}")
        if len(self.seed_names) != 4:
            raise SchemaError("Exactly four seed variables (age, gender, region, urbanity) are required")
        for seed in self.seed_names:
            if seed not in names:
                raise SchemaError(f"Seed variable '{seed}' is not in the schema")
        age = self[self.seed_names[0]]
        if age.kind != "continuous" or not age.integer:
            raise SchemaError(f"Seed age variable '{age.name}' must be continuous and integer-valued")
        for seed in self.seed_names[1:]:
            if not self[seed].is_categorical:
                raise SchemaError(f"Seed variable '{seed}' must be categorical")

    def __getitem__(self, name: str) -> VariableSpec:
        for spec in self.variables:
            if spec.name == name:
                return spec
        raise SchemaError(f"Unknown variable '{name}'")

    def __contains__(self, name: str) -> bool:
        return any(spec.name == name for spec in self.variables)

    @property
    def names(self) -> List[str]:
        return [spec.name for spec in self.variables]

    @property
    def age_name(self) -> str:
        return self.seed_names[0]

    def extended(self, extra: Iterable[VariableSpec]) -> "PopulationSchema":
        return PopulationSchema(self.variables + tuple(extra), self.seed_names)

    def to_dict(self) -> Dict:
        return {
            "variables": [spec.to_dict() for spec in self.variables],
            "seed_names": list(self.seed_names),
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "PopulationSchema":
        try:
            variables = tuple(VariableSpec.from_dict(v) for v in payload["variables"])
            return cls(variables, tuple(payload["seed_names"]))
        except KeyError as e:
            raise SchemaError(f"Schema document is missing field {e}")

    def schema_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path: str) -> "PopulationSchema":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


@dataclass(frozen=True)
class Column:
    values: np.ndarray
    missing: np.ndarray

    def __len__(self) -> int:
        return len(self.values)


StratumKey = Tuple[Tuple[str, str], ...]


def make_stratum_key(pairs: Iterable[Tuple[str, str]]) -> StratumKey:
    """Canonical stratum key: (variable, level) pairs sorted by variable name."""
    return tuple(sorted((str(var), str(level)) for var, level in pairs))


def stratum_label(key: StratumKey) -> str:
    if not key:
        return "*"
    return "|".join(f"{var}={level}" for var, level in key)


def parse_stratum_label(label: str) -> StratumKey:
    if label in ("", "*"):
        return ()
    pairs = []
    for part in label.split("|"):
        var, _, level = part.partition("=")
        pairs.append((var, level))
    return make_stratum_key(pairs)


class PopulationTable:
    """Immutable columnar table validated against a PopulationSchema."""

    def __init__(self, schema: PopulationSchema, columns: Mapping[str, Column], validate: bool = True):
        self.schema = schema
        missing_names = [name for name in schema.names if name not in columns]
        if missing_names:
            raise ValidationError(f"Table is missing columns {missing_names}")
        unknown = [name for name in columns if name not in schema]
        if unknown:
            raise ValidationError(f"Unknown columns {unknown}")
        lengths = {len(columns[name]) for name in schema.names}
        if len(lengths) > 1:
            raise ValidationError(f"Columns have differing lengths {sorted(lengths)}")
        self.n = lengths.pop() if lengths else 0
        self._columns: Dict[str, Column] = {}
        for spec in schema.variables:
            column = columns[spec.name]
            values = np.asarray(column.values, dtype=np.int64 if spec.is_categorical else np.float64)
            missing = np.asarray(column.missing, dtype=bool)
            if validate:
                bad = spec.first_violation(values, missing)
                if bad is not None:
                    raise ValidationError(
                        f"Row {bad + 1}, column '{spec.name}': value {self._describe(spec, values[bad])} "
                        f"violates {spec.kind} constraints"
                    )
                if spec.name in schema.seed_names and missing.any():
                    raise ValidationError(
                        f"Row {int(np.flatnonzero(missing)[0]) + 1}, column '{spec.name}': "
                        "seed columns cannot contain missing values"
                    )
            values = values.copy()
            missing = missing.copy()
            if spec.is_categorical:
                values[missing] = -1
            else:
                values[missing] = np.nan
            values.setflags(write=False)
            missing.setflags(write=False)
            self._columns[spec.name] = Column(values, missing)

    @staticmethod
    def _describe(spec: VariableSpec, value) -> str:
        return repr(int(value)) if spec.is_categorical else repr(float(value))

    @classmethod
    def from_arrays(cls, schema: PopulationSchema, arrays: Mapping[str, np.ndarray]) -> "PopulationTable":
        """Build from raw arrays: level codes (-1 missing) or floats (NaN missing)."""
        columns = {}
        for spec in schema.variables:
            if spec.name not in arrays:
                raise ValidationError(f"Table is missing column '{spec.name}'")
            values = np.asarray(arrays[spec.name])
            if spec.is_categorical:
                values = values.astype(np.int64)
                missing = values < 0
            else:
                values = values.astype(np.float64)
                missing = np.isnan(values)
            columns[spec.name] = Column(values, missing)
        unknown = [name for name in arrays if name not in schema]
        if unknown:
            raise ValidationError(f"Unknown columns {unknown}")
        return cls(schema, columns)

    @classmethod
    def from_values(cls, schema: PopulationSchema, data: Mapping[str, Sequence]) -> "PopulationTable":
        """Build from python values: level labels for categoricals, None for missing."""
        arrays = {}
        for name, raw in data.items():
            spec = schema[name]
            if spec.is_categorical:
                arrays[name] = np.array([-1 if v is None else spec.level_code(str(v)) for v in raw], dtype=np.int64)
            else:
                arrays[name] = np.array([np.nan if v is None else float(v) for v in raw], dtype=np.float64)
        return cls.from_arrays(schema, arrays)

    def __len__(self) -> int:
        return self.n

    def column(self, name: str) -> Column:
        try:
            return self._columns[name]
        except KeyError:
            raise SchemaError(f"Unknown variable '{name}'")

    def values(self, name: str) -> np.ndarray:
        return self.column(name).values

    def missing(self, name: str) -> np.ndarray:
        return self.column(name).missing

    def labels(self, name: str) -> np.ndarray:
        """Level labels of a categorical column as an object array (None where missing)."""
        spec = self.schema[name]
        if not spec.is_categorical:
            raise SchemaError(f"Variable '{name}' is not categorical")
        lookup = np.array(list(spec.levels) + [None], dtype=object)
        return lookup[self.values(name)]

    def take(self, rows: np.ndarray) -> "PopulationTable":
        rows = np.asarray(rows)
        columns = {
            name: Column(col.values[rows], col.missing[rows]) for name, col in self._columns.items()
        }
        return PopulationTable(self.schema, columns, validate=False)

    def with_columns(self, arrays: Mapping[str, np.ndarray], schema: PopulationSchema = None) -> "PopulationTable":
        """New table with some columns replaced (or added when ``schema`` is extended)."""
        schema = schema or self.schema
        merged = {name: np.asarray(col.values) for name, col in self._columns.items() if name in schema}
        merged.update(arrays)
        return PopulationTable.from_arrays(schema, merged)

    def to_frame(self) -> pd.DataFrame:
        """Values as a DataFrame: labels for categoricals, floats elsewhere."""
        data = {}
        for spec in self.schema.variables:
            data[spec.name] = self.labels(spec.name) if spec.is_categorical else self.values(spec.name)
        return pd.DataFrame(data, columns=self.schema.names)


def _format_numbers(spec: VariableSpec, values: np.ndarray, missing: np.ndarray) -> List[str]:
    if spec.integer_valued:
        return ["" if m else str(int(v)) for v, m in zip(values.tolist(), missing.tolist())]
    return ["" if m else repr(float(v)) for v, m in zip(values.tolist(), missing.tolist())]


def _parse_float(cell: str) -> float:
    # float() is correctly rounded, so repr-written values read back bit-exactly
    if not cell:
        return np.nan
    try:
        return float(cell)
    except ValueError:
        return np.nan


def load_population(path: str, schema: PopulationSchema) -> PopulationTable:
    """
    Read a UTF-8 CSV population file and validate it against ``schema``.
    Empty fields are missing; categorical values are level labels.
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False, encoding="utf-8")
    except FileNotFoundError:
        raise ValidationError(f"Population file not found: {path}")
    except pd.errors.EmptyDataError:
        raise ValidationError(f"Population file is empty: {path}")

    unknown = [name for name in frame.columns if name not in schema]
    if unknown:
        raise ValidationError(f"Unknown column(s) {unknown} in {path}")
    absent = [name for name in schema.names if name not in frame.columns]
    if absent:
        raise ValidationError(f"Column(s) {absent} of the schema are absent from {path}")

    arrays = {}
    for spec in schema.variables:
        raw = frame[spec.name].str.strip()
        empty = (raw == "").to_numpy()
        if spec.is_categorical:
            lookup = {label: code for code, label in enumerate(spec.levels)}
            codes = raw.map(lookup)
            unmatched = codes.isna().to_numpy() & ~empty
            if unmatched.any():
                row = int(np.flatnonzero(unmatched)[0])
                raise ValidationError(
                    f"Row {row + 1}, column '{spec.name}': '{raw.iloc[row]}' is not one of {list(spec.levels)}"
                )
            arrays[spec.name] = codes.fillna(-1).to_numpy(dtype=np.int64)
        else:
            numbers = np.array([_parse_float(cell) for cell in raw], dtype=np.float64)
            unparsed = np.isnan(numbers) & ~empty
            if unparsed.any():
                row = int(np.flatnonzero(unparsed)[0])
                raise ValidationError(f"Row {row + 1}, column '{spec.name}': '{raw.iloc[row]}' is not a number")
            arrays[spec.name] = numbers

    table = PopulationTable.from_arrays(schema, arrays)
    logger.info("Loaded %d rows from %s", table.n, path)
    return table


def emit_population(table: PopulationTable, path: str) -> None:
    """Write ``table`` as CSV with columns in schema order; missing cells stay empty."""
    data = {}
    for spec in table.schema.variables:
        column = table.column(spec.name)
        if spec.is_categorical:
            labels = table.labels(spec.name)
            data[spec.name] = ["" if label is None else label for label in labels]
        else:
            data[spec.name] = _format_numbers(spec, column.values, column.missing)
    frame = pd.DataFrame(data, columns=table.schema.names)
    frame.to_csv(path, index=False, encoding="utf-8", lineterminator="\n")
    logger.info("Wrote %d rows to %s", table.n, path)


def recode_age_class(age: Union[int, float]) -> int:
    """Eight-level age class: <20, 20-29, ..., 70-79, 80+."""
    if age is None or not np.isfinite(age) or age < 0 or age > 105:
        raise ValidationError(f"Age {age} outside [0, 105]")
    return int(np.searchsorted(_AGE_CLASS_EDGES, age, side="right")) + 1


def recode_age_class_array(ages: np.ndarray) -> np.ndarray:
    ages = np.asarray(ages, dtype=np.float64)
    if np.any(~np.isfinite(ages)) or np.any(ages < 0) or np.any(ages > 105):
        raise ValidationError("Ages outside [0, 105] cannot be recoded into age classes")
    return np.searchsorted(_AGE_CLASS_EDGES, ages, side="right") + 1


def column_moments(values: np.ndarray) -> Tuple[float, float]:
    """Sample mean and standard deviation (n-1) of the non-missing values."""
    values = np.asarray(values, dtype=np.float64)
    values = values[np.isfinite(values)]
    if values.size < 2:
        raise ValidationError("At least two observed values are needed for z-score moments")
    return float(values.mean()), float(values.std(ddof=1))


def percentile_to_zscore(p, mean: float = None, sd: float = None):
    """
    Linear standardisation (p - mean) / sd. Without explicit moments the
    sample mean and sample sd of ``p`` (which must then be a column) are used.
    """
    if mean is None or sd is None:
        sample_mean, sample_sd = column_moments(p)
        mean = sample_mean if mean is None else mean
        sd = sample_sd if sd is None else sd
    if not sd > 0:
        raise ValidationError(f"Standard deviation must be positive, got {sd}")
    if np.ndim(p) == 0:
        return (float(p) - mean) / sd
    return (np.asarray(p, dtype=np.float64) - mean) / sd


def zscore_to_percentile(z, mean: float, sd: float):
    """Inverse transform, rounded and clamped to the 1..100 percentile range."""
    return np.clip(np.rint(mean + sd * np.asarray(z, dtype=np.float64)), 1, 100)
