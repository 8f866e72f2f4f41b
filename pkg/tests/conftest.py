import json
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def listing_texts() -> dict[int, str]:
    return {i: (FIXTURES / f"listing{i}.json").read_text() for i in range(1, 6)}


def load_scenario_dict(name: str) -> dict:
    return json.loads((FIXTURES / "scenarios" / f"{name}.json").read_text())
