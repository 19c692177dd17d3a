import numpy as np
import pytest

from ssar.autodiff import precision

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def tiny_backbone(nd: int = 2):
    """Two-stage backbone small enough for second-scale training tests."""
    from ssar.models import ResNetConfig

    return ResNetConfig(widths=(4, 8), blocks=(1, 1), stem_kernel=3, stem_stride=1, maxpool=False, nd=nd)
