import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from docforge.elements import ElementRepository
from docforge.layout import builtin_templates
from docforge.model import ElementKind


@pytest.fixture(scope="session")
def repo():
    return ElementRepository.build_procedural(
        {k: 16 for k in ElementKind}, languages=("en", "de"), seed=7)


@pytest.fixture(scope="session")
def store():
    return builtin_templates()


def pytest_terminal_summary(terminalreporter):
    gate = sys.modules.get("test_acceptance")
    verdicts = getattr(gate, "VERDICTS", None) if gate else None
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for line in verdicts:
            terminalreporter.write_line(line)
