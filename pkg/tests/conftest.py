from __future__ import annotations

import sys

import numpy as np
import pytest

from extcontrol.data import Dataset


def stratified(cells, size=10):
    """Binary-C dataset from {(c, a): responders out of ``size``}."""
    C, A, Y = [], [], []
    for (c, a), r in cells.items():
        for k in range(size):
            C.append(c)
            A.append(a)
            Y.append(1.0 if k < r else 0.0)
    return Dataset.from_arrays(np.array(C, float)[:, None], A, Y)


@pytest.fixture
def toy():
    # E(Y|1,0)=0.8, E(Y|0,0)=0.5, E(Y|1,1)=0.6, E(Y|0,1)=0.2, P(C=1)=0.5
    return stratified({(0, 1): 8, (0, 0): 5, (1, 1): 6, (1, 0): 2})


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is not None and module.VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in module.VERDICTS:
            terminalreporter.write_line(line)
