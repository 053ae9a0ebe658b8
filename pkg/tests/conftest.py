import numpy as np
import pytest


def pytest_addoption(parser):
    parser.addoption(
        "--run-full",
        action="store_true",
        default=False,
        help="run the full-scale replication (several hours single-threaded)",
    )


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "full: full-scale acceptance runs, enabled with --run-full"
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-full"):
        return
    skip_full = pytest.mark.skip(reason="full-scale run; use --run-full")
    for item in items:
        if "full" in item.keywords:
            item.add_marker(skip_full)


@pytest.fixture
def rng():
    return np.random.default_rng(20240901)
