import pytest

from growformer.transformer import ModelConfig
from helpers import ACCEPTANCE_LINES


@pytest.fixture
def tiny_encoder():
    return ModelConfig(variant="post-ln-encoder", n_layers=2, hidden=16, n_heads=2, d_ff=32,
                       vocab=20, max_seq=12)


@pytest.fixture
def tiny_decoder():
    return ModelConfig(variant="pre-ln-decoder", n_layers=2, hidden=16, n_heads=2, d_ff=32,
                       vocab=20, max_seq=12)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
