import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=30,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_pools():
    """Small labeled synthetic and natural-like pools plus a labeled validation set."""
    from twincount import synthgen as sg
    from twincount.datapipe import Dataset

    def make(style, n, seed):
        cfg = sg.GeneratorConfig(count_weights=sg.uniform_weights(1, 5),
                                 style=sg.get_style(style), seed=seed)
        return sg.generate_samples(cfg, n)

    syn = Dataset.from_samples(make("pc_like", 24, 11), origin="synthetic")
    nat = Dataset.from_samples(make("bf_like", 16, 12), origin="natural")
    val = Dataset.from_samples(make("bf_like", 8, 13), origin="natural")
    return nat, syn, val


_VERDICTS = {}


@pytest.fixture
def verdict():
    """Record one acceptance line and fail the test when the criterion does not hold."""
    def record(number, ok, detail):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {detail}"
        _VERDICTS[number] = line
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[number])
