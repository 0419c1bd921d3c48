"""
Root conftest.py — shared pytest configuration.

The `pythonpath = src` setting in pytest.ini adds `src/` to sys.path for all
tests, so individual test files do not need manual sys.path manipulation.
"""
import pytest


def pytest_collection_modifyitems(config, items):
    """Skip slow tests unless explicitly requested."""
    if not config.getoption("--run-slow", default=False):
        skip_slow = pytest.mark.skip(reason="closed-loop policy run (pass --run-slow to enable)")
        for item in items:
            if "slow" in item.keywords:
                item.add_marker(skip_slow)


def pytest_addoption(parser):
    parser.addoption(
        "--run-slow",
        action="store_true",
        default=False,
        help="Run slow tests that warm up policies over many clips",
    )
