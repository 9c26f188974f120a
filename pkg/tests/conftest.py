from pathlib import Path

import pytest

from eog.kg import KnowledgeGraph, TaskInstance

DATA = Path(__file__).parent / "data"


@pytest.fixture
def data_dir():
    return DATA


@pytest.fixture
def chain():
    return KnowledgeGraph([("A", "r1", "B"), ("B", "r2", "C")])


@pytest.fixture
def diamond():
    return KnowledgeGraph([("A", "left", "B"), ("B", "down", "D"), ("A", "right", "C"), ("C", "down", "D")])


@pytest.fixture
def chain_task():
    return TaskInstance("q1", "what does a reach via r1 and r2", ("A",), frozenset({"C"}))


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def record_criterion(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
