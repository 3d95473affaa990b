import csv
from pathlib import Path

import pytest

DATA_DIR = Path(__file__).resolve().parents[1] / "data" / "moleculeace"


def corpus_smiles(name: str = "CHEMBL2047_EC50", limit: int | None = None) -> list[str]:
    with (DATA_DIR / f"{name}.csv").open(newline="") as fh:
        rows = [r["smiles"] for r in csv.DictReader(fh)]
    return rows[:limit] if limit else rows


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return DATA_DIR


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, name: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2} {name}: {detail}")
    print(ACCEPTANCE_LINES[-1])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
