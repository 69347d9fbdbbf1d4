import numpy as np
import pytest

from vimsvp.numerics import precision
from vimsvp.vim import VimConfig


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training runs")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(autouse=True)
def f64_default():
    with precision("f64"):
        yield


@pytest.fixture
def tiny_config():
    """Small enough for finite differences, large enough to exercise every path."""
    return VimConfig(image_size=8, patch_size=4, channels=3, d_model=8, n_layers=2, state_dim=3,
                     conv_width=3, expand_factor=2, n_classes=3)


@pytest.fixture
def small_config():
    return VimConfig(image_size=16, patch_size=4, channels=3, d_model=16, n_layers=2, state_dim=4,
                     conv_width=4, expand_factor=2, n_classes=4)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(request):
    """Collects one (criterion, passed, detail) line per acceptance check."""
    return request.config.stash.setdefault(ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(lines):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
