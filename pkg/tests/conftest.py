import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from consensus_uda.taxonomy import load_config  # noqa: E402


@pytest.fixture(scope="session")
def config():
    return load_config()


@pytest.fixture
def rng():
    return np.random.default_rng(20240517)


def random_simplex(rng, shape, c):
    x = rng.random(shape + (c,)) + 1e-3
    return x / x.sum(axis=-1, keepdims=True)


_ACCEPTANCE = []


@pytest.fixture
def verdict():
    """Record one acceptance line; returns the pass flag so tests can assert on it."""

    def record(number, title, ok, detail=""):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
        print(line)
        _ACCEPTANCE.append((number, line))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
