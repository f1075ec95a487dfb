import numpy as np
import pytest

from textinv.data import render_concept
from textinv.model import FrozenModel, ModelConfig

TINY = ModelConfig(codec_width=8, unet_width=16, text_dim=16, text_blocks=1, text_heads=2)


def build_tiny(seed: int = 0) -> FrozenModel:
    return FrozenModel.build(TINY, seed).freeze()


@pytest.fixture(scope="session")
def tiny_model():
    return build_tiny()


@pytest.fixture(scope="session")
def tiny_concept():
    return render_concept(("star", "teal", "dotted"), 3, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
