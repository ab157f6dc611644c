import pytest

from clinmask.synth import synthesize_registry
from clinmask.tabular import split_holdout


@pytest.fixture(scope="session")
def small_registry():
    return synthesize_registry(240, 10, seed=11, missing_rate=0.05)


@pytest.fixture(scope="session")
def small_split(small_registry):
    _, records = small_registry
    return split_holdout(records, 40, seed=5)
