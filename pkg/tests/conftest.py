from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from kvdirect import Transformer, toy_config, toy_sliding_config  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def toy_model() -> Transformer:
    return Transformer(toy_config())


@pytest.fixture(scope="session")
def sliding_model() -> Transformer:
    return Transformer(toy_sliding_config())


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
