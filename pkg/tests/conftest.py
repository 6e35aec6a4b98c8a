import os
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
DATA = Path(os.environ.get("RULE_DATA_DIR", ROOT / "data"))


def random_graph(rng, n_ent, n_base_rel, n_trip):
    """Random base triplets plus their inverses, as an id array."""
    from rulekg.data import augment_inverses

    t = np.stack([rng.integers(0, n_ent, n_trip), rng.integers(0, n_base_rel, n_trip),
                  rng.integers(0, n_ent, n_trip)], axis=1)
    t = np.unique(t, axis=0)
    return augment_inverses(t, n_base_rel)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def umls_dir():
    d = DATA / "umls"
    if not (d / "train.txt").exists():
        pytest.skip("UMLS data not available")
    return d


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
