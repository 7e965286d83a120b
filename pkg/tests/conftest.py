import pytest

from reboundkit.forecaster import ModelConfig, train
from reboundkit.simkit import generate_dataset, reference_profile


@pytest.fixture(scope="session")
def small_traces():
    """Twelve simulated 145-step days of the reference patient."""
    return generate_dataset([reference_profile()], 2, seed=3)


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(hidden=8, head_hidden=4, epochs=2, batch=16, seed=1)


@pytest.fixture(scope="session")
def tiny_model(small_traces, tiny_config):
    model, _ = train(small_traces[:4], tiny_config)
    return model


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(LINES):
            terminalreporter.write_line(LINES[k])
