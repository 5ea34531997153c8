"""
Synthetic population construction from a model pack.

The seed strata are expanded into records, then every chain entry is drawn
in order from its fitted equations. Random numbers come from a counter-based
contract keyed by (master seed, stream, record, entry, draw), so the output
does not depend on how records are split over worker threads.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.optimize import brentq
from scipy.special import expit, ndtri, softmax

from chain_config import ChainConfig
from chain_fit import entry_linear_predictor
from errors import ConfigError, NumericError, PackFormatError, ValidationError
from model_pack import EntryFit, Equation, ModelPack, SeedStrataTable
from schema_core import PopulationSchema, PopulationTable, VariableSpec, stratum_label, zscore_to_percentile

logger = logging.getLogger(__name__)

_MASK64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_DOUBLE_UNIT = 2.0 ** -53

DRAW_VALUE = 0
DRAW_PRESENCE = 1
BLOCK_SIZE = 65536
AGE_RANGE = (0, 105)
CALIBRATION_BOUNDS = (1e-6, 1e6)
_HERMITE_NODES, _HERMITE_WEIGHTS = hermegauss(40)
_HERMITE_WEIGHTS = _HERMITE_WEIGHTS / np.sqrt(2.0 * np.pi)


def splitmix64(x) -> np.ndarray:
    """SplitMix64 finaliser on uint64 values (wrapping arithmetic)."""
    with np.errstate(over="ignore"):
        z = np.asarray(x, dtype=np.uint64) + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


@dataclass(frozen=True)
class RngContract:
    """Counter-based random numbers: every value is a pure function of its coordinates."""

    seed: int
    stream: int = 0

    def _bits(self, records, entry: int, draw: int) -> np.ndarray:
        base = splitmix64(np.uint64(self.seed & _MASK64) ^ splitmix64(np.uint64(self.stream & _MASK64)))
        h = splitmix64(base ^ np.asarray(records, dtype=np.uint64))
        h = splitmix64(h ^ np.uint64(entry))
        return splitmix64(h ^ np.uint64(draw))

    def uniforms(self, records, entry: int, draw: int = DRAW_VALUE) -> np.ndarray:
        """Uniforms on the open interval (0, 1), one per record."""
        bits = self._bits(records, entry, draw) >> np.uint64(11)
        return (bits.astype(np.float64) + 0.5) * _DOUBLE_UNIT

    def normals(self, records, entry: int, draw: int = DRAW_VALUE) -> np.ndarray:
        return ndtri(self.uniforms(records, entry, draw))

    def categorical(self, records, entry: int, probabilities: np.ndarray, draw: int = DRAW_VALUE) -> np.ndarray:
        """Level codes drawn by inversion of each row's cumulative probabilities."""
        u = self.uniforms(records, entry, draw)
        cdf = np.cumsum(probabilities, axis=1)
        codes = np.sum(u[:, None] * cdf[:, -1:] >= cdf, axis=1)
        return np.minimum(codes, probabilities.shape[1] - 1).astype(np.int64)

    def derive(self, stream: int) -> "RngContract":
        return RngContract(self.seed, stream)


def synthetic_schema(pack: ModelPack, disease_presence: bool = False) -> PopulationSchema:
    """Pack schema, extended with ``<name>_present`` columns for probability entries when requested."""
    if not disease_presence:
        return pack.schema
    extra = [
        VariableSpec.categorical(f"{entry.dependent}_present", ("no", "yes"), source_tag="derived")
        for entry in pack.chain.entries
        if entry.family == "logit_linear"
    ]
    return pack.schema.extended(extra)


def expand_seed(strata: SeedStrataTable, schema: PopulationSchema) -> PopulationTable:
    """
    One record per counted seed; merged age ranges hand out their ages round
    robin. Records aged outside 0..105 are left out. Non-seed columns are empty.
    """
    age, *others = strata.seed_names
    if tuple(strata.seed_names) != tuple(schema.seed_names):
        raise ValidationError(f"Seed strata columns {list(strata.seed_names)} do not match the schema")
    counts = np.array([row.count for row in strata.rows], dtype=np.int64)
    lows = np.array([row.age_low for row in strata.rows], dtype=np.int64)
    widths = np.array([row.age_high - row.age_low + 1 for row in strata.rows], dtype=np.int64)
    total = int(counts.sum())
    starts = np.cumsum(counts) - counts
    within = np.arange(total) - np.repeat(starts, counts)
    ages = np.repeat(lows, counts) + within % np.repeat(widths, counts)

    arrays: Dict[str, np.ndarray] = {age: ages.astype(np.float64)}
    for position, name in enumerate(others):
        spec = schema[name]
        codes = np.array([spec.level_code(row.levels[position]) for row in strata.rows], dtype=np.int64)
        arrays[name] = np.repeat(codes, counts)
    keep = (ages >= AGE_RANGE[0]) & (ages <= AGE_RANGE[1])
    excluded = int(total - keep.sum())
    if excluded:
        logger.info("Left out %d seed records aged outside %d..%d", excluded, *AGE_RANGE)
    arrays = {name: values[keep] for name, values in arrays.items()}
    n = int(keep.sum())
    for spec in schema.variables:
        if spec.name not in arrays:
            arrays[spec.name] = np.full(n, -1, dtype=np.int64) if spec.is_categorical else np.full(n, np.nan)
    return PopulationTable.from_arrays(schema, arrays)


def _empty(spec: VariableSpec, n: int) -> np.ndarray:
    return np.full(n, -1, dtype=np.int64) if spec.is_categorical else np.full(n, np.nan)


def _draw_values(fitted: EntryFit, spec: VariableSpec, table: PopulationTable, rows: np.ndarray,
                 rng: RngContract, index: int) -> np.ndarray:
    eta, sigma = entry_linear_predictor(fitted, table, rows)
    if fitted.family == "linear":
        y = eta + sigma * rng.normals(rows, index)
        if fitted.response_zscore is not None:
            return zscore_to_percentile(y, *fitted.response_zscore)
        y = np.clip(y, -np.inf if spec.min is None else spec.min, np.inf if spec.max is None else spec.max)
        return np.rint(y) if spec.integer_valued else y
    if fitted.family == "logit_linear":
        return np.clip(expit(eta + sigma * rng.normals(rows, index)), 0.0, 1.0)
    if fitted.family == "logistic":
        return (rng.uniforms(rows, index) < expit(eta)).astype(np.int64)
    probabilities = softmax(np.column_stack([np.zeros(rows.size), eta]), axis=1)
    return rng.categorical(rows, index, probabilities)


def _eligible_rows(chain: ChainConfig, index: int, table: PopulationTable) -> np.ndarray:
    entry = chain.entries[index]
    if entry.population_filter is None:
        return np.arange(table.n)
    return np.flatnonzero(entry.population_filter.mask(table))


def _blocks(rows: np.ndarray) -> List[np.ndarray]:
    return [rows[i:i + BLOCK_SIZE] for i in range(0, rows.size, BLOCK_SIZE)] or [rows]


def sample_entry(pack: ModelPack, index: int, table: PopulationTable, rng: RngContract,
                 threads: int = 1) -> np.ndarray:
    """Values of chain entry ``index`` for every record of ``table`` (missing outside its filter)."""
    entry = pack.chain.entries[index]
    fitted = pack.entries[index]
    if fitted.dependent != entry.dependent:
        raise PackFormatError(f"Pack entry {index + 1} is '{fitted.dependent}', chain expects '{entry.dependent}'")
    spec = table.schema[entry.dependent]
    rows = _eligible_rows(pack.chain, index, table)
    out = _empty(spec, table.n)
    if rows.size == 0:
        return out
    blocks = _blocks(rows)

    def run(block):
        return _draw_values(fitted, spec, table, block, rng, index)

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, blocks))
    else:
        parts = [run(block) for block in blocks]
    out[rows] = np.concatenate(parts)
    return out


def sample_chain(pack: ModelPack, seeds: PopulationTable, rng: RngContract, threads: int = 1,
                 disease_presence: bool = False, upto: Optional[int] = None) -> PopulationTable:
    """
    Draw every chain entry (or the first ``upto``) for the expanded seed
    records. Seed columns are copied unchanged.
    """
    schema = synthetic_schema(pack, disease_presence)
    arrays = {}
    for spec in schema.variables:
        if spec.name in schema.seed_names:
            arrays[spec.name] = np.asarray(seeds.values(spec.name))
        else:
            arrays[spec.name] = _empty(spec, seeds.n)
    table = PopulationTable.from_arrays(schema, arrays)
    stop = len(pack.chain.entries) if upto is None else upto
    for index in range(stop):
        entry = pack.chain.entries[index]
        values = sample_entry(pack, index, table, rng, threads)
        table = table.with_columns({entry.dependent: values})
        logger.debug("Sampled %s for %d records", entry.dependent, table.n)

    if disease_presence:
        presence = {}
        for index, entry in enumerate(pack.chain.entries[:stop]):
            if entry.family != "logit_linear":
                continue
            probability = table.values(entry.dependent)
            observed = ~table.missing(entry.dependent)
            draws = rng.uniforms(np.arange(table.n), index, DRAW_PRESENCE) < np.nan_to_num(probability)
            presence[f"{entry.dependent}_present"] = np.where(observed, draws.astype(np.int64), -1)
        if presence:
            table = table.with_columns(presence)
    return table


@dataclass
class ParameterDrawReport:
    draw_index: int
    equations: int = 0
    repaired: List[Dict] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {"draw_index": self.draw_index, "equations": self.equations,
                "repaired_covariances": len(self.repaired), "repairs": list(self.repaired)}


def draw_parameters(pack: ModelPack, draw_index: int, seed: int) -> Tuple[ModelPack, ParameterDrawReport]:
    """
    Pack whose coefficients are one draw from N(estimate, covariance) per
    equation. Covariances with negative eigenvalues have them clipped at 0 and
    are listed in the report.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, draw_index]))
    report = ParameterDrawReport(draw_index)

    def drawn(fitted: EntryFit, equation: Optional[Equation]) -> Optional[Equation]:
        if equation is None or equation.coefficients is None:
            return equation
        if equation.covariance is None:
            raise PackFormatError(
                f"Equation '{fitted.dependent}' stratum {stratum_label(equation.stratum)} has no covariance; "
                "parameter draws need a pack fitted with exported covariances"
            )
        beta = np.asarray(equation.coefficients, dtype=np.float64)
        cov = np.asarray(equation.covariance, dtype=np.float64)
        eigenvalues, vectors = np.linalg.eigh(0.5 * (cov + cov.T))
        if eigenvalues.min(initial=0.0) < 0.0:
            report.repaired.append({
                "entry": fitted.dependent,
                "stratum": stratum_label(equation.stratum),
                "min_eigenvalue": float(eigenvalues.min()),
            })
            eigenvalues = np.clip(eigenvalues, 0.0, None)
        z = rng.standard_normal(beta.size)
        report.equations += 1
        values = beta.ravel() + vectors @ (np.sqrt(eigenvalues) * z)
        return replace(equation, coefficients=values.reshape(beta.shape))

    entries = []
    for fitted in pack.entries:
        strata = tuple(drawn(fitted, eq) for eq in fitted.strata)
        entries.append(replace(fitted, strata=strata, pooled=drawn(fitted, fitted.pooled)))
    if report.repaired:
        logger.warning("Parameter draw %d: %d covariance blocks needed PSD repair", draw_index, len(report.repaired))
    return replace(pack, entries=tuple(entries)), report


@dataclass(frozen=True)
class CalibrationAdjustment:
    variable: str
    target: float
    multiplier: float
    achieved: float
    before: float

    @property
    def shift(self) -> float:
        return float(np.log(self.multiplier))

    def to_dict(self) -> Dict:
        return {
            "variable": self.variable,
            "target": self.target,
            "multiplier": self.multiplier,
            "shift": self.shift,
            "achieved": self.achieved,
            "before": self.before,
        }


def expected_prevalence(family: str, eta: np.ndarray, sigma: np.ndarray, shift: float = 0.0) -> float:
    """Mean predicted probability; for logit_linear entries the logit-normal mean by Gauss-Hermite quadrature."""
    if eta.size == 0:
        raise ValidationError("No records to compute an expected prevalence over")
    if family == "logistic" or not np.any(sigma):
        return float(np.mean(expit(eta + shift)))
    total = np.zeros_like(eta)
    for node, weight in zip(_HERMITE_NODES, _HERMITE_WEIGHTS):
        total += weight * expit(eta + shift + sigma * node)
    return float(np.mean(total))


def shift_intercepts(fitted: EntryFit, shift: float) -> EntryFit:
    def shifted(equation: Optional[Equation]) -> Optional[Equation]:
        if equation is None or equation.coefficients is None:
            return equation
        coefficients = np.array(equation.coefficients, dtype=np.float64, copy=True)
        coefficients[equation.intercept_index()] += shift
        return replace(equation, coefficients=coefficients)

    return replace(
        fitted,
        strata=tuple(shifted(eq) for eq in fitted.strata),
        pooled=shifted(fitted.pooled),
    )


def calibrate_marginal(pack: ModelPack, variable: str, target: float, seeds: PopulationTable,
                       rng: RngContract, tol: float = 1e-4,
                       threads: int = 1) -> Tuple[CalibrationAdjustment, ModelPack]:
    """
    Odds multiplier c (an intercept shift of ln c on every equation of the
    entry) making the expected prevalence over the generated records equal
    ``target``. The search brackets c in [1e-6, 1e6].
    """
    index = pack.chain.index_of(variable)
    fitted = pack.entries[index]
    if fitted.family not in ("logistic", "logit_linear"):
        raise ConfigError(f"Calibration needs a logistic or logit_linear entry, '{variable}' is {fitted.family}")
    if not 0.0 < target < 1.0:
        raise ConfigError(f"Calibration target must lie strictly between 0 and 1, got {target}")
    prefix = sample_chain(pack, seeds, rng, threads, upto=index)
    rows = _eligible_rows(pack.chain, index, prefix)
    eta, sigma = entry_linear_predictor(fitted, prefix, rows)

    def gap(shift: float) -> float:
        return expected_prevalence(fitted.family, eta, sigma, shift) - target

    before = gap(0.0) + target
    lo, hi = np.log(CALIBRATION_BOUNDS[0]), np.log(CALIBRATION_BOUNDS[1])
    if gap(lo) > 0.0 or gap(hi) < 0.0:
        raise NumericError(
            f"Prevalence {target} for '{variable}' is unreachable with an odds multiplier in "
            f"[{CALIBRATION_BOUNDS[0]:g}, {CALIBRATION_BOUNDS[1]:g}]"
        )
    shift = brentq(gap, lo, hi, xtol=1e-12, rtol=1e-14, maxiter=200)
    achieved = gap(shift) + target
    if abs(achieved - target) >= tol:
        raise NumericError(f"Calibration of '{variable}' reached {achieved:.6g}, target {target:.6g}")
    adjustment = CalibrationAdjustment(variable, float(target), float(np.exp(shift)), float(achieved), float(before))

    adjusted = shift_intercepts(fitted, shift)
    previous = 1.0 if fitted.calibration is None else float(fitted.calibration.get("multiplier", 1.0))
    record = adjustment.to_dict()
    record["multiplier"] = previous * adjustment.multiplier
    record["shift"] = float(np.log(record["multiplier"]))
    record.pop("variable")
    adjusted = replace(adjusted, calibration=record)
    logger.info("Calibrated %s: odds multiplier %.6g, prevalence %.6g -> %.6g",
                variable, adjustment.multiplier, before, achieved)
    return adjustment, pack.with_entry(adjusted)
