import numpy as np
import pytest

from cspm.data import GeneratorConfig, generate


@pytest.fixture(scope="session")
def small_data():
    """A few thousand samples with planted signal, for fast model tests."""
    return generate(GeneratorConfig(n_users=200, n_items=200, samples=3000, seed=11))


@pytest.fixture(scope="session")
def null_data_100k():
    return generate(GeneratorConfig(samples=100_000, spatiotemporal_signal=0.0, seed=5))


@pytest.fixture(scope="session")
def signal_data_100k():
    return generate(GeneratorConfig(samples=100_000, spatiotemporal_signal=1.0, preference_sharpness=4.0, seed=6))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion(request):
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", [])

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
