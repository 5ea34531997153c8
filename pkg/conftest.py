import numpy as np
import pytest
from scipy.special import expit

from chain_config import ChainConfig, ModelSpecEntry
from schema_core import PopulationSchema, PopulationTable, VariableSpec

SEED_NAMES = ("age", "gender", "region", "urbanity")


def mini_schema() -> PopulationSchema:
    return PopulationSchema((
        VariableSpec.continuous("age", min=0, integer=True),
        VariableSpec.categorical("gender", ["male", "female"]),
        VariableSpec.categorical("region", ["R01", "R02"]),
        VariableSpec.categorical("urbanity", ["1", "2"]),
        VariableSpec.percentile("income_pct"),
        VariableSpec.categorical("smoking", ["never", "current"], source_tag="survey"),
        VariableSpec.continuous("bmi", min=10, max=70, source_tag="survey"),
        VariableSpec.probability("chd"),
    ), SEED_NAMES)


def mini_arrays(n: int, seed: int = 1) -> dict:
    rng = np.random.default_rng(seed)
    age = rng.integers(0, 101, n).astype(np.float64)
    gender = rng.integers(0, 2, n)
    region = rng.integers(0, 2, n)
    urbanity = rng.integers(0, 2, n)
    income = np.clip(np.rint(40 + 0.2 * age + 10 * gender + rng.normal(0, 15, n)), 1, 100)
    smoking = (rng.random(n) < expit(-1.5 + 0.02 * age - 0.4 * gender)).astype(np.int64)
    bmi = np.clip(22 + 0.05 * age + 1.0 * smoking + rng.normal(0, 2, n), 10, 70)
    chd = expit(-4 + 0.04 * age + 0.5 * smoking + rng.normal(0, 0.2, n))
    return {"age": age, "gender": gender, "region": region, "urbanity": urbanity,
            "income_pct": income, "smoking": smoking, "bmi": bmi, "chd": chd}


def mini_table(n: int = 3000, seed: int = 1) -> PopulationTable:
    return PopulationTable.from_arrays(mini_schema(), mini_arrays(n, seed))


def mini_chain(**overrides) -> ChainConfig:
    entries = (
        ModelSpecEntry("income_pct", "linear", stratifiers=("gender",)),
        ModelSpecEntry("smoking", "logistic", stratifiers=("gender",)),
        ModelSpecEntry("bmi", "linear", stratifiers=("gender",)),
        ModelSpecEntry("chd", "logit_linear", stratifiers=("gender",)),
    )
    return ChainConfig(entries=overrides.pop("entries", entries), **overrides)


@pytest.fixture
def schema():
    return mini_schema()


@pytest.fixture
def table():
    return mini_table()


@pytest.fixture
def chain():
    return mini_chain()


@pytest.fixture(scope="session")
def fitted_pack():
    from chain_fit import fit_chain

    return fit_chain(mini_table(), mini_chain())
