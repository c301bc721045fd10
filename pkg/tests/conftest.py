import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gridstd.synthcorpus import CorpusConfig, generate  # noqa: E402

# a corpus small enough for per-test training runs
SMALL = dict(n_train=160, n_validation=60, n_test=60)
SMALL_OVERRIDES = [f"corpus.{k}={v}" for k, v in SMALL.items()] + [
    "train.epochs=2", "model.blocks=8,16",
]


@pytest.fixture(scope="session")
def small_corpus():
    return generate(CorpusConfig(**SMALL))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion():
    """Record a PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
