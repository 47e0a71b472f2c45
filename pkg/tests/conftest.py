import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("stwave", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("stwave")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_problem():
    """A 6-node, 3-day synthetic problem shared by the training tests."""
    from stwave.config import RunConfig
    from stwave.experiment import load_problem

    run = RunConfig({"data.synthetic_nodes": 6, "data.synthetic_days": 3, "model.nhid": 8,
                     "train.max_epochs": 2, "train.batch_size": 32})
    return run, load_problem(run)


def pytest_terminal_summary(terminalreporter):
    module = __import__("sys").modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number][1])
