"""
End-to-end stages behind the command line.

The secure side fits the chain and writes the model pack (``run_fit``,
``run_audit``); the open side works from the pack alone (``run_generate``,
``run_calibrate``, ``run_evaluate``). Every stage returns a result dictionary
with ``success``, the files it produced and its counts.
"""
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from chain_config import ChainConfig, default_chain, default_schema
from chain_fit import ImputationSet, crossvalidate, fit_chain
from errors import ConfigError, SchemaError
from evaluation import ADULT_AGE, emit_report, stratified_compare
from faux_oracle import faux_spec, generate_faux, oracle_marginals
from generator import RngContract, calibrate_marginal, draw_parameters, expand_seed, sample_chain, synthetic_schema
from model_pack import SEED_POLICIES, audit_pack, describe_pack, load_pack, save_pack
from schema_core import PopulationSchema, emit_population, load_population

logger = logging.getLogger(__name__)

PACK_NAME = "model.synthpack.json"
FIT_LOG_NAME = "fit_log.json"
SEED_STRATA_NAME = "seed_strata.csv"

# Path fields that environment variables may override.
PATH_ENV = {
    "input": "SYNTHPOP_INPUT",
    "schema": "SYNTHPOP_SCHEMA",
    "chain": "SYNTHPOP_CHAIN",
    "pack": "SYNTHPOP_PACK",
    "source": "SYNTHPOP_SOURCE",
    "synthetic": "SYNTHPOP_SYNTHETIC",
    "output_dir": "SYNTHPOP_OUTPUT_DIR",
}

DEFAULT_COMPARISONS = (
    {"target": "smoking", "strata": ["age", "gender", "education"]},
    {"target": "smoking", "strata": ["age", "gender"]},
    {"target": "bmi", "strata": ["age", "gender"]},
    {"target": "household_size", "strata": ["age", "gender"]},
)


@dataclass
class RunConfig:
    """One run of any command. Loaded from JSON; flags and path variables override it."""

    input: Optional[str] = None
    replicates: List[str] = field(default_factory=list)
    schema: Optional[str] = None
    chain: Optional[str] = None
    pack: Optional[str] = None
    source: Optional[str] = None
    synthetic: Optional[str] = None
    synthetic_schema: Optional[str] = None
    output_dir: str = "."
    preset: str = "paperlike-small"
    seed: Optional[int] = None
    policy: str = "keep_flagged"
    min_count: Optional[int] = None
    threads: int = field(default_factory=lambda: os.cpu_count() or 1)
    cv_folds: int = 0
    param_draws: int = 0
    calibrate: Dict[str, float] = field(default_factory=dict)
    force: bool = False
    disease_presence: bool = False
    inject_missing: bool = True
    oracle: bool = False
    comparisons: List[Dict] = field(default_factory=list)
    labels: Tuple[str, str] = ("source", "synthetic")
    adult_age: int = ADULT_AGE

    def __post_init__(self):
        if self.policy not in SEED_POLICIES:
            raise ConfigError(f"Unknown disclosure policy '{self.policy}' (choose from {list(SEED_POLICIES)})")
        if self.threads < 1:
            raise ConfigError("--threads must be at least 1")
        if self.param_draws < 0 or self.cv_folds < 0:
            raise ConfigError("Counts of parameter draws and folds cannot be negative")
        self.labels = tuple(self.labels)
        self.calibrate = {str(k): float(v) for k, v in dict(self.calibrate).items()}

    @classmethod
    def from_dict(cls, payload: Mapping) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ConfigError(f"Run config has unknown keys {unknown}")
        try:
            return cls(**payload)
        except TypeError as e:
            raise ConfigError(f"Run config is invalid: {e}")

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as f:
                payload = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"Run config not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"Run config {path} is not valid JSON: {e}")
        if not isinstance(payload, dict):
            raise ConfigError(f"Run config {path} must hold a JSON object")
        return cls.from_dict(payload)

    def merged(self, flags: Mapping[str, object], environ: Mapping[str, str] = None) -> "RunConfig":
        """Flag > environment variable > this config. Only path fields read the environment."""
        environ = os.environ if environ is None else environ
        values = asdict(self)
        for name, variable in PATH_ENV.items():
            if environ.get(variable):
                values[name] = environ[variable]
        for name, value in flags.items():
            if value is not None:
                values[name] = value
        return RunConfig.from_dict(values)

    def require(self, *names: str) -> None:
        for name in names:
            if getattr(self, name) in (None, ""):
                flag = name.replace("_", "-")
                hint = f" or {PATH_ENV[name]}" if name in PATH_ENV else ""
                raise ConfigError(f"'{name}' is required for this command (--{flag}{hint})")


def _output_path(run: RunConfig, name: str) -> str:
    os.makedirs(run.output_dir, exist_ok=True)
    return os.path.join(run.output_dir, name)


def _write_json(path: str, payload) -> str:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True, allow_nan=False)
        f.write("\n")
    return path


def _clean(value):
    """JSON-safe copy of ``value`` with non-finite floats as null."""
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, (float, np.floating)):
        return float(value) if np.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    return value


def load_schema(run: RunConfig) -> PopulationSchema:
    return PopulationSchema.load(run.schema) if run.schema else default_schema()


def load_chain(run: RunConfig, schema: PopulationSchema) -> ChainConfig:
    if run.chain:
        chain = ChainConfig.load(run.chain)
    else:
        chain = default_chain().restricted_to(schema.names)
    if run.min_count is not None:
        chain = replace(chain, min_count=run.min_count)
    return chain


def derived_seed(seed: int, draw_index: int) -> int:
    """Master seed of replicate population ``draw_index``."""
    state = np.random.SeedSequence([seed, draw_index]).generate_state(1, np.uint64)[0]
    return int(state >> np.uint64(1))


def run_faux_gen(run: RunConfig) -> Dict:
    """Draw a faux source population and write it with its schema, chain and (optionally) oracle."""
    run.require("seed")
    spec = faux_spec(run.preset)
    table = generate_faux(spec, run.seed, inject_missing=run.inject_missing)
    paths = {
        "population": _output_path(run, "population.csv"),
        "schema": _output_path(run, "schema.json"),
        "chain": _output_path(run, "chain.json"),
    }
    emit_population(table, paths["population"])
    spec.schema().save(paths["schema"])
    with open(paths["chain"], "w", encoding="utf-8") as f:
        f.write(spec.chain().dumps() + "\n")
    if run.oracle:
        paths["oracle"] = _write_json(_output_path(run, "oracle.json"),
                                      _clean(oracle_marginals(spec, seed=run.seed)))
    return {
        "success": True,
        "stage": "faux-gen",
        "preset": spec.name,
        "seed": run.seed,
        "records": table.n,
        "variables": len(table.schema.variables),
        "paths": paths,
    }


def _fit_data(run: RunConfig, schema: PopulationSchema):
    source = load_population(run.input, schema)
    if not run.replicates:
        return source
    replicates = tuple(load_population(path, schema) for path in run.replicates)
    return ImputationSet(replicates, source)


def run_fit(run: RunConfig) -> Dict:
    """Fit the chain, audit the pack and write it with the fit log and seed strata counts."""
    run.require("input")
    schema = load_schema(run)
    chain = load_chain(run, schema)
    data = _fit_data(run, schema)
    log: List[Dict] = []
    pack = fit_chain(data, chain, policy=run.policy, threads=run.threads, log=log)

    cv_reports = []
    if run.cv_folds:
        for dependent in chain.dependents:
            report = crossvalidate(data, chain, dependent, folds=run.cv_folds, seed=chain.imputation_seed)
            cv_reports.append(report.to_dict())
            log.append({"stage": "cv", **report.to_dict()})

    audit = audit_pack(pack)
    audit.raise_for_violations()

    paths = {
        "pack": _output_path(run, PACK_NAME),
        "fit_log": _output_path(run, FIT_LOG_NAME),
        "seed_strata": _output_path(run, SEED_STRATA_NAME),
    }
    digest = save_pack(pack, paths["pack"])
    _write_json(paths["fit_log"], _clean(log))
    pack.seed_strata.save_csv(paths["seed_strata"])
    fallbacks = sum(1 for record in log if record.get("stage") == "fit" and record.get("fallback"))
    return {
        "success": True,
        "stage": "fit",
        "records": data.base.n if isinstance(data, ImputationSet) else data.n,
        "entries": len(pack.entries),
        "fallback_strata": fallbacks,
        "flagged_seed_cells": len(pack.seed_strata.flagged),
        "pack_sha256": digest,
        "audit": audit.to_dict(),
        "cross_validation": cv_reports,
        "summary": describe_pack(pack),
        "paths": paths,
    }


def run_audit(run: RunConfig) -> Dict:
    run.require("pack")
    pack = load_pack(run.pack)
    report = audit_pack(pack)
    result = {"success": report.passed, "stage": "audit", "pack": run.pack, **report.to_dict()}
    result["paths"] = {"audit": _write_json(_output_path(run, "audit.json"), report.to_dict())}
    return result


def _load_audited(run: RunConfig):
    pack = load_pack(run.pack)
    report = audit_pack(pack)
    if not report.passed:
        if not run.force:
            report.raise_for_violations()
        logger.warning("Using a pack that fails the audit (%d violations) because of --force",
                       len(report.violations))
    return pack, report


def _calibrated(pack, targets: Mapping[str, float], seeds, rng: RngContract, threads: int):
    adjustments = []
    for variable, target in targets.items():
        adjustment, pack = calibrate_marginal(pack, variable, target, seeds, rng, threads=threads)
        adjustments.append(adjustment.to_dict())
    return pack, adjustments


def run_generate(run: RunConfig) -> Dict:
    """
    Expand the seed strata and sample the chain. With ``param_draws`` k > 0,
    k populations are drawn, each from its own parameter draw and derived seed.
    """
    run.require("pack", "seed")
    pack, audit = _load_audited(run)
    seeds = expand_seed(pack.seed_strata, pack.schema)
    excluded = pack.seed_strata.total - seeds.n
    plans = [(None, run.seed)] if not run.param_draws else [
        (i, derived_seed(run.seed, i)) for i in range(run.param_draws)
    ]

    outputs = []
    for draw_index, seed in plans:
        rng = RngContract(seed)
        current, draw_report = pack, None
        if draw_index is not None:
            current, draw_report = draw_parameters(pack, draw_index, run.seed)
        current, adjustments = _calibrated(current, run.calibrate, seeds, rng, run.threads)
        table = sample_chain(current, seeds, rng, run.threads, disease_presence=run.disease_presence)
        suffix = "" if draw_index is None else f"_draw{draw_index}"
        population_path = _output_path(run, f"synthetic{suffix}.csv")
        emit_population(table, population_path)
        manifest = {
            "pack": os.path.basename(run.pack),
            "pack_sha256": pack.pack_hash(),
            "seed": seed,
            "master_seed": run.seed,
            "draw_index": draw_index,
            "seed_records": pack.seed_strata.total,
            "records_out": table.n,
            "excluded_out_of_age_range": excluded,
            "audit_passed": audit.passed,
            "forced": bool(run.force and not audit.passed),
            "calibrations": adjustments,
            "parameter_draw": None if draw_report is None else draw_report.to_dict(),
            "disease_presence": run.disease_presence,
        }
        manifest_path = _write_json(_output_path(run, f"synthetic{suffix}.manifest.json"), _clean(manifest))
        outputs.append({"population": population_path, "manifest": manifest_path, "records": table.n})
        logger.info("Generated %d synthetic records into %s", table.n, population_path)

    paths = {}
    if run.disease_presence:
        paths["schema"] = _output_path(run, "synthetic_schema.json")
        synthetic_schema(pack, True).save(paths["schema"])
    return {
        "success": True,
        "stage": "generate",
        "populations": outputs,
        "records": outputs[0]["records"],
        "excluded": excluded,
        "paths": paths,
    }


def run_calibrate(run: RunConfig) -> Dict:
    """Write a copy of the pack whose calibrated entries match their target prevalences."""
    run.require("pack", "seed")
    if not run.calibrate:
        raise ConfigError("Nothing to calibrate: give at least one --calibrate variable=target")
    pack, _ = _load_audited(run)
    seeds = expand_seed(pack.seed_strata, pack.schema)
    pack, adjustments = _calibrated(pack, run.calibrate, seeds, RngContract(run.seed), run.threads)
    path = _output_path(run, "calibrated.synthpack.json")
    digest = save_pack(pack, path)
    return {
        "success": True,
        "stage": "calibrate",
        "calibrations": adjustments,
        "pack_sha256": digest,
        "paths": {"pack": path},
    }


def _comparisons(run: RunConfig, schema: PopulationSchema) -> List[Dict]:
    if run.comparisons:
        for item in run.comparisons:
            for name in (item.get("target"), *item.get("strata", ())):
                if name not in schema:
                    raise SchemaError(f"Comparison variable '{name}' is not in the schema")
        return list(run.comparisons)
    return [item for item in DEFAULT_COMPARISONS
            if all(name in schema for name in (item["target"], *item["strata"]))]


def run_evaluate(run: RunConfig) -> Dict:
    """Compare a synthetic population with its source and write the report tables."""
    run.require("source", "synthetic")
    schema = load_schema(run)
    source = load_population(run.source, schema)
    target_schema = PopulationSchema.load(run.synthetic_schema) if run.synthetic_schema else schema
    synthetic = load_population(run.synthetic, target_schema)
    comparisons = [
        stratified_compare(source, synthetic, item["target"], item.get("strata", ()), item.get("level"), run.labels)
        for item in _comparisons(run, schema)
    ]
    report = emit_report(source, synthetic, run.output_dir, comparisons, run.labels, run.adult_age)
    return {
        "success": True,
        "stage": "evaluate",
        "summary": report.summary,
        "comparisons": len(comparisons),
        "paths": report.paths,
    }


def dump_default_chain(schema: Optional[PopulationSchema] = None) -> str:
    chain = default_chain()
    if schema is not None:
        chain = chain.restricted_to(schema.names)
    return chain.dumps()


STAGES = {
    "faux-gen": run_faux_gen,
    "fit": run_fit,
    "audit": run_audit,
    "generate": run_generate,
    "calibrate": run_calibrate,
    "evaluate": run_evaluate,
}
