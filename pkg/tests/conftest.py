from __future__ import annotations

import pytest

import app.settings as settings_mod
from app.settings import Settings


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the long reproduction checks")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running reproduction check, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def settings(monkeypatch, tmp_path):
    """Fresh Settings singleton rooted in tmp_path; tests may mutate it."""
    s = Settings(OUTPUT_DIR=str(tmp_path / "runs"), DATA_DIR=str(tmp_path / "uci"), RECORD_WALL_TIME=False)
    monkeypatch.setattr(settings_mod, "_settings", s)
    return s
