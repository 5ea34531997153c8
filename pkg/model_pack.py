"""
The model pack: the only artefact that leaves the secure environment.

It holds the schema, the chain configuration, disclosure-checked seed strata
counts and the fitted equations. Serialisation is canonical JSON (sorted
keys, compact separators, repr floats) so identical packs are byte-identical.
"""
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
import pandas as pd

from chain_config import ChainConfig
from errors import AuditError, ConfigError, DisclosureError, PackFormatError, SchemaError
from schema_core import (
    PopulationSchema,
    PopulationTable,
    StratumKey,
    parse_stratum_label,
    stratum_label,
)
from spline_glm import ColumnDescriptor

logger = logging.getLogger(__name__)

PACK_VERSION = 1
PSD_TOL = 1e-8
SEED_POLICIES = ("fail", "merge_adjacent_age", "keep_flagged")


@dataclass(frozen=True)
class SeedStratum:
    """Count of seed records in one (age range, gender, region, urbanity) cell."""

    age_low: int
    age_high: int
    levels: Tuple[str, ...]
    count: int
    flagged: bool = False

    @property
    def age_label(self) -> str:
        if self.age_low == self.age_high:
            return str(self.age_low)
        return f"{self.age_low}-{self.age_high}"


@dataclass(frozen=True)
class SeedStrataTable:
    rows: Tuple[SeedStratum, ...]
    seed_names: Tuple[str, ...]
    min_count: int
    policy: str

    @property
    def total(self) -> int:
        return int(sum(row.count for row in self.rows))

    @property
    def flagged(self) -> List[SeedStratum]:
        return [row for row in self.rows if row.flagged]

    def to_frame(self) -> pd.DataFrame:
        age, *others = self.seed_names
        records = []
        for row in self.rows:
            record = {age: row.age_label}
            record.update(dict(zip(others, row.levels)))
            record["count"] = row.count
            record["flag"] = int(row.flagged)
            records.append(record)
        return pd.DataFrame(records, columns=[age, *others, "count", "flag"])

    def save_csv(self, path: str) -> None:
        self.to_frame().to_csv(path, index=False, encoding="utf-8", lineterminator="\n")

    def to_dict(self) -> Dict:
        return {
            "seed_names": list(self.seed_names),
            "min_count": self.min_count,
            "policy": self.policy,
            "rows": [
                [row.age_low, row.age_high, list(row.levels), row.count, row.flagged] for row in self.rows
            ],
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "SeedStrataTable":
        rows = tuple(
            SeedStratum(int(lo), int(hi), tuple(levels), int(count), bool(flagged))
            for lo, hi, levels, count, flagged in payload["rows"]
        )
        return cls(rows, tuple(payload["seed_names"]), int(payload["min_count"]), payload["policy"])


def export_seed_strata(table: PopulationTable, min_count: int, policy: str = "keep_flagged") -> SeedStrataTable:
    """
    Aggregate the seed variables into counts per cell and apply the disclosure
    policy: ``fail`` on any small cell, ``merge_adjacent_age`` to pool
    consecutive ages within a (gender, region, urbanity) group, or
    ``keep_flagged`` to retain small cells with a flag.
    """
    if policy not in SEED_POLICIES:
        raise ConfigError(f"Unknown seed strata policy '{policy}' (choose from {list(SEED_POLICIES)})")
    seed_names = table.schema.seed_names
    age, *others = seed_names
    frame = pd.DataFrame({age: table.values(age).astype(np.int64)})
    for name in others:
        frame[name] = table.values(name)
    counts = frame.groupby(list(seed_names), sort=True).size().reset_index(name="count")

    def labels_of(record) -> Tuple[str, ...]:
        return tuple(table.schema[name].levels[int(record[name])] for name in others)

    rows: List[SeedStratum] = []
    if policy == "merge_adjacent_age":
        for _, group in counts.groupby(others, sort=True):
            group = group.sort_values(age)
            labels = labels_of(group.iloc[0])
            if int(group["count"].sum()) < min_count:
                raise DisclosureError(
                    f"Seed cells {dict(zip(others, labels))} hold {int(group['count'].sum())} records in total, "
                    f"below the minimum of {min_count} even after merging all ages"
                )
            merged: List[SeedStratum] = []
            low, running = None, 0
            for a, c in zip(group[age].tolist(), group["count"].tolist()):
                low = a if low is None else low
                running += c
                if running >= min_count:
                    merged.append(SeedStratum(low, a, labels, running))
                    low, running = None, 0
            if running:
                last = merged.pop()
                merged.append(SeedStratum(last.age_low, int(group[age].iloc[-1]), labels, last.count + running))
            rows.extend(merged)
    else:
        for record in counts.to_dict("records"):
            count = int(record["count"])
            small = count < min_count
            if small and policy == "fail":
                raise DisclosureError(
                    f"Seed cell {age}={record[age]} {dict(zip(others, labels_of(record)))} holds {count} "
                    f"records, below the minimum of {min_count}"
                )
            rows.append(SeedStratum(int(record[age]), int(record[age]), labels_of(record), count, small))
    strata = SeedStrataTable(tuple(rows), tuple(seed_names), min_count, policy)
    logger.info("Seed strata: %d cells, %d flagged, %d records (policy %s)",
                len(strata.rows), len(strata.flagged), strata.total, policy)
    return strata


@dataclass(frozen=True)
class Equation:
    """
    One fitted regression. Fallback equations carry only their stratum and n;
    generation then uses the entry's pooled equation.
    """

    stratum: StratumKey
    family: str
    n: int
    descriptors: Tuple[ColumnDescriptor, ...] = ()
    coefficients: Optional[np.ndarray] = None
    covariance: Optional[np.ndarray] = None
    sigma: Optional[float] = None
    levels: Tuple[str, ...] = ()
    splines: Mapping[str, Tuple[float, ...]] = field(default_factory=dict)
    dropped: Tuple[ColumnDescriptor, ...] = ()
    fallback: bool = False
    fallback_reason: str = ""
    converged: bool = True
    iterations: int = 0
    ridge: float = 0.0
    replicates: int = 1
    extras: Mapping[str, object] = field(default_factory=dict)

    @property
    def n_params(self) -> int:
        return 0 if self.coefficients is None else int(np.asarray(self.coefficients).size)

    def intercept_index(self) -> int:
        for i, descriptor in enumerate(self.descriptors):
            if descriptor.kind == "intercept":
                return i
        raise SchemaError(f"Equation for stratum {stratum_label(self.stratum)} has no intercept")

    def to_dict(self) -> Dict:
        payload = {
            "stratum": stratum_label(self.stratum),
            "family": self.family,
            "n": int(self.n),
            "fallback": self.fallback,
            "reason": self.fallback_reason,
            "descriptors": [d.to_dict() for d in self.descriptors],
            "coefficients": None if self.coefficients is None else np.asarray(self.coefficients).tolist(),
            "covariance": None,
            "sigma": None if self.sigma is None else float(self.sigma),
            "levels": list(self.levels),
            "splines": {name: list(knots) for name, knots in sorted(self.splines.items())},
            "dropped": [d.to_dict() for d in self.dropped],
            "converged": self.converged,
            "iterations": int(self.iterations),
            "ridge": float(self.ridge),
            "replicates": int(self.replicates),
        }
        if self.covariance is not None:
            cov = np.asarray(self.covariance)
            payload["covariance"] = {"dim": cov.shape[0], "lower": cov[np.tril_indices(cov.shape[0])].tolist()}
        payload.update(self.extras)
        return payload

    @classmethod
    def from_dict(cls, payload: Mapping) -> "Equation":
        known = {
            "stratum", "family", "n", "fallback", "reason", "descriptors", "coefficients", "covariance",
            "sigma", "levels", "splines", "dropped", "converged", "iterations", "ridge", "replicates",
        }
        covariance = None
        if payload.get("covariance") is not None:
            dim = int(payload["covariance"]["dim"])
            lower = np.asarray(payload["covariance"]["lower"], dtype=np.float64)
            if lower.size != dim * (dim + 1) // 2:
                raise PackFormatError(f"Covariance of dimension {dim} has {lower.size} stored entries")
            covariance = np.zeros((dim, dim))
            covariance[np.tril_indices(dim)] = lower
            covariance = covariance + np.tril(covariance, -1).T
        coefficients = payload.get("coefficients")
        return cls(
            stratum=parse_stratum_label(payload["stratum"]),
            family=payload["family"],
            n=int(payload["n"]),
            descriptors=tuple(ColumnDescriptor.from_dict(d) for d in payload.get("descriptors", ())),
            coefficients=None if coefficients is None else np.asarray(coefficients, dtype=np.float64),
            covariance=covariance,
            sigma=payload.get("sigma"),
            levels=tuple(payload.get("levels", ())),
            splines={k: tuple(v) for k, v in payload.get("splines", {}).items()},
            dropped=tuple(ColumnDescriptor.from_dict(d) for d in payload.get("dropped", ())),
            fallback=bool(payload.get("fallback", False)),
            fallback_reason=payload.get("reason", ""),
            converged=bool(payload.get("converged", True)),
            iterations=int(payload.get("iterations", 0)),
            ridge=float(payload.get("ridge", 0.0)),
            replicates=int(payload.get("replicates", 1)),
            extras={k: v for k, v in payload.items() if k not in known},
        )


@dataclass(frozen=True)
class EntryFit:
    dependent: str
    family: str
    strata: Tuple[Equation, ...]
    pooled: Optional[Equation] = None
    stratifiers: Tuple[str, ...] = ()
    zscore: Mapping[str, Tuple[float, float]] = field(default_factory=dict)
    response_zscore: Optional[Tuple[float, float]] = None
    calibration: Optional[Mapping[str, float]] = None
    extras: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "strata", tuple(self.strata))
        object.__setattr__(self, "_index", {eq.stratum: eq for eq in self.strata})

    def equation_for(self, key: StratumKey) -> Equation:
        """Stratum equation, or the pooled one when the stratum fell back or was never seen."""
        equation = self._index.get(key)
        if equation is not None and not equation.fallback:
            return equation
        if self.pooled is None:
            raise SchemaError(
                f"No equation for '{self.dependent}' in stratum {stratum_label(key)} and no pooled fallback"
            )
        return self.pooled

    def equations(self) -> List[Equation]:
        """Every equation carrying coefficients."""
        fitted = [eq for eq in self.strata if not eq.fallback]
        if self.pooled is not None:
            fitted.append(self.pooled)
        return fitted

    def to_dict(self) -> Dict:
        payload = {
            "dependent": self.dependent,
            "family": self.family,
            "stratifiers": list(self.stratifiers),
            "zscore": {name: list(moments) for name, moments in sorted(self.zscore.items())},
            "response_zscore": None if self.response_zscore is None else list(self.response_zscore),
            "pooled": None if self.pooled is None else self.pooled.to_dict(),
            "strata": [eq.to_dict() for eq in self.strata],
            "calibration": None if self.calibration is None else dict(self.calibration),
        }
        payload.update(self.extras)
        return payload

    @classmethod
    def from_dict(cls, payload: Mapping) -> "EntryFit":
        known = {
            "dependent", "family", "stratifiers", "zscore", "response_zscore", "pooled", "strata", "calibration",
        }
        rz = payload.get("response_zscore")
        return cls(
            dependent=payload["dependent"],
            family=payload["family"],
            strata=tuple(Equation.from_dict(eq) for eq in payload.get("strata", ())),
            pooled=None if payload.get("pooled") is None else Equation.from_dict(payload["pooled"]),
            stratifiers=tuple(payload.get("stratifiers", ())),
            zscore={k: (float(v[0]), float(v[1])) for k, v in payload.get("zscore", {}).items()},
            response_zscore=None if rz is None else (float(rz[0]), float(rz[1])),
            calibration=payload.get("calibration"),
            extras={k: v for k, v in payload.items() if k not in known},
        )


@dataclass(frozen=True)
class ModelPack:
    schema: PopulationSchema
    chain: ChainConfig
    seed_strata: SeedStrataTable
    entries: Tuple[EntryFit, ...]
    version: int = PACK_VERSION
    extras: Mapping[str, object] = field(default_factory=dict)

    def entry(self, dependent: str) -> EntryFit:
        for fitted in self.entries:
            if fitted.dependent == dependent:
                return fitted
        raise SchemaError(f"Pack has no fitted entry for '{dependent}'")

    def with_entry(self, fitted: EntryFit) -> "ModelPack":
        entries = tuple(fitted if e.dependent == fitted.dependent else e for e in self.entries)
        return replace(self, entries=entries)

    def pack_hash(self) -> str:
        return hashlib.sha256(serialize(self)).hexdigest()


def serialize(pack: ModelPack) -> bytes:
    schema = pack.schema.to_dict()
    schema["hash"] = pack.schema.schema_hash()
    document = {
        "version": pack.version,
        "schema": schema,
        "chain": pack.chain.to_dict(),
        "seed_strata": pack.seed_strata.to_dict(),
        "equations": [entry.to_dict() for entry in pack.entries],
    }
    document.update(pack.extras)
    try:
        text = json.dumps(document, sort_keys=True, separators=(",", ":"), allow_nan=False, ensure_ascii=True)
    except ValueError as e:
        raise PackFormatError(f"Pack contains a non-finite number: {e}")
    return text.encode("utf-8")


def deserialize(data: bytes) -> ModelPack:
    try:
        document = json.loads(data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data)
    except UnicodeDecodeError as e:
        raise PackFormatError(f"Pack is not UTF-8 (byte {e.start})")
    except json.JSONDecodeError as e:
        raise PackFormatError(f"Malformed pack at byte {e.pos}: {e.msg}")
    if not isinstance(document, dict):
        raise PackFormatError("Pack document must be a JSON object")
    for key in ("version", "schema", "chain", "seed_strata", "equations"):
        if key not in document:
            raise PackFormatError(f"Pack is missing top-level field '{key}'")
    if document["version"] != PACK_VERSION:
        raise PackFormatError(f"Unsupported pack version {document['version']} (expected {PACK_VERSION})")
    try:
        schema_doc = dict(document["schema"])
        recorded = schema_doc.pop("hash", None)
        schema = PopulationSchema.from_dict(schema_doc)
        if recorded != schema.schema_hash():
            raise PackFormatError("Schema hash recorded in the pack does not match its schema")
        chain = ChainConfig.from_dict(document["chain"])
        strata = SeedStrataTable.from_dict(document["seed_strata"])
        entries = tuple(EntryFit.from_dict(e) for e in document["equations"])
    except (KeyError, TypeError, ValueError) as e:
        raise PackFormatError(f"Pack structure is invalid: {e!r}")
    except (SchemaError, ConfigError) as e:
        raise PackFormatError(f"Pack content is invalid: {e.detail}")
    known = {"version", "schema", "chain", "seed_strata", "equations"}
    extras = {k: v for k, v in document.items() if k not in known}
    return ModelPack(schema, chain, strata, entries, int(document["version"]), extras)


def save_pack(pack: ModelPack, path: str) -> str:
    data = serialize(pack)
    with open(path, "wb") as f:
        f.write(data)
    logger.info("Wrote model pack %s (%d bytes)", path, len(data))
    return hashlib.sha256(data).hexdigest()


def load_pack(path: str) -> ModelPack:
    try:
        with open(path, "rb") as f:
            return deserialize(f.read())
    except FileNotFoundError:
        raise PackFormatError(f"Model pack not found: {path}")


@dataclass
class AuditReport:
    violations: List[str] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)
    equations_checked: int = 0
    strata_checked: int = 0

    @property
    def passed(self) -> bool:
        return not self.violations

    def raise_for_violations(self) -> None:
        if self.violations:
            raise AuditError(f"Model pack failed the disclosure audit: {'; '.join(self.violations[:5])}"
                             + (f" (+{len(self.violations) - 5} more)" if len(self.violations) > 5 else ""))

    def to_dict(self) -> Dict:
        return {
            "passed": self.passed,
            "violations": list(self.violations),
            "warnings": list(self.warnings),
            "equations_checked": self.equations_checked,
            "strata_checked": self.strata_checked,
        }


def _is_psd(matrix: np.ndarray) -> bool:
    eigenvalues = np.linalg.eigvalsh(0.5 * (matrix + matrix.T))
    scale = max(1.0, float(np.max(np.abs(eigenvalues))) if eigenvalues.size else 1.0)
    return bool(eigenvalues.min(initial=0.0) >= -PSD_TOL * scale)


def audit_pack(pack: ModelPack) -> AuditReport:
    """
    Disclosure audit: no record-level fields, no unflagged small seed cell,
    no small equation without a fallback flag, and positive semi-definite covariances.
    """
    report = AuditReport()
    min_count = pack.seed_strata.min_count

    for key in pack.extras:
        report.violations.append(f"unexpected top-level field '{key}'")
    for fitted in pack.entries:
        for key in fitted.extras:
            report.violations.append(f"unexpected field '{key}' in entry '{fitted.dependent}'")

    for row in pack.seed_strata.rows:
        report.strata_checked += 1
        where = f"seed cell age={row.age_label} {list(row.levels)}"
        if row.count < 1:
            report.violations.append(f"{where}: non-positive count {row.count}")
        elif row.count < min_count:
            if not row.flagged:
                report.violations.append(f"{where}: count {row.count} below {min_count} without flag")
            elif pack.seed_strata.policy != "keep_flagged":
                report.violations.append(f"{where}: flagged cell under policy '{pack.seed_strata.policy}'")
    if pack.seed_strata.flagged:
        report.warnings.append(f"{len(pack.seed_strata.flagged)} seed cells below {min_count} are flagged")

    for fitted in pack.entries:
        candidates = list(fitted.strata) + ([fitted.pooled] if fitted.pooled is not None else [])
        for equation in candidates:
            report.equations_checked += 1
            where = f"'{fitted.dependent}' stratum {stratum_label(equation.stratum)}"
            for key in equation.extras:
                report.violations.append(f"{where}: unexpected field '{key}'")
            if equation.n < min_count and not equation.fallback:
                report.violations.append(f"{where}: fitted on n={equation.n} < {min_count} without fallback flag")
            if equation.fallback and equation.coefficients is not None:
                report.violations.append(f"{where}: fallback equation carries its own coefficients")
            if equation.covariance is not None:
                cov = np.asarray(equation.covariance)
                if cov.shape != (equation.n_params, equation.n_params):
                    report.violations.append(f"{where}: covariance shape {cov.shape} does not match coefficients")
                elif not _is_psd(cov):
                    report.violations.append(f"{where}: covariance is not positive semi-definite")
    logger.info("Audit: %d equations, %d seed cells, %d violations",
                report.equations_checked, report.strata_checked, len(report.violations))
    return report


def describe_pack(pack: ModelPack) -> Dict:
    """Summary used by the command line after fitting and auditing."""
    return {
        "version": pack.version,
        "schema_hash": pack.schema.schema_hash(),
        "entries": [
            {
                "dependent": e.dependent,
                "family": e.family,
                "strata": len(e.strata),
                "fallback_strata": sum(1 for eq in e.strata if eq.fallback),
                "pooled": e.pooled is not None,
                "calibrated": e.calibration is not None,
            }
            for e in pack.entries
        ],
        "seed_cells": len(pack.seed_strata.rows),
        "seed_records": pack.seed_strata.total,
    }

