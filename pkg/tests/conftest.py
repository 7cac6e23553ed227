import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from advseg.model import ModelConfig, init_params

settings.register_profile("advseg", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("advseg")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    # small enough for finite differences over the whole model
    return ModelConfig(image_size=8, context_length=4, embed_dim=4, adapter_dim=3, encoder_channels=(2, 3))


@pytest.fixture(scope="session")
def tiny_params(tiny_config):
    return init_params(tiny_config)


_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one verdict line per acceptance criterion for the terminal summary."""
    lines = request.config.stash[_LINES]

    def emit(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)

    return emit


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash[_LINES]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
