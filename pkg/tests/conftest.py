import json
from pathlib import Path

import pytest

from helpers import CARDS_SQL, make_db

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def cards_db(tmp_path):
    return make_db(tmp_path / "cards.sqlite", CARDS_SQL)


@pytest.fixture
def toy_root(tmp_path):
    """Toy database, manifest, config and the committed cassette under tmp_path."""
    from avsql.toy import materialize

    materialize(tmp_path, FIXTURES / "toy_cassette.jsonl")
    return tmp_path


@pytest.fixture
def toy_config(toy_root):
    return json.loads((toy_root / "config.json").read_text())


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
