import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ipgrepair.data import DatasetSpec, gen_synthetic
from ipgrepair.nn_core import init_mlp, train_sgd


@pytest.fixture(scope="session")
def small_data():
    ds = gen_synthetic(DatasetSpec("synthetic_blobs", num_samples=400, dims=20, num_classes=3,
                                   separation=0.8, density=0.3, seed=1))
    return ds


@pytest.fixture(scope="session")
def small_model(small_data):
    model = init_mlp(20, [16, 8], 3, seed=2)
    return train_sgd(model, small_data.X, small_data.y, lr=0.01, batch_size=16, epochs=15,
                     seed=3)


ACCEPTANCE_LINES = []


def record_criterion(number: int, name: str, passed: bool, detail: str) -> str:
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
