from importlib import resources
from pathlib import Path

import pytest

from momentbound.problem import load_problem

DATA = Path(str(resources.files("momentbound") / "data"))


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return DATA


@pytest.fixture(scope="session")
def example1():
    return load_problem(DATA / "example1.json")


@pytest.fixture(scope="session")
def example2():
    return load_problem(DATA / "example2.json")


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
