import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

MNIST_DIR = os.environ.get("PA_MNIST_DIR", "/root/data/mnist")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def mnist_available():
    return os.path.isdir(MNIST_DIR) and any("t10k" in f for f in os.listdir(MNIST_DIR))


ACCEPTANCE_LINES: list[str] = []


def record(criterion: int, title: str, ok, detail: str = "") -> None:
    """Log one criterion line; ``ok`` may be ``None`` for a skipped run or ``"warn"``."""
    tag = {True: "PASS", False: "FAIL", None: "SKIP", "warn": "WARN"}[ok]
    line = f"[{tag}] criterion {criterion}: {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
