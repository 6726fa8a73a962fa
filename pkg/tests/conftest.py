import numpy as np
import pytest

from causalfed import data as dt
from causalfed.numerics import ArchSpec


def tiny_arch(k=3, channels=1, side=4, hidden=(5, 4)):
    return ArchSpec("mlp", (channels, side, side), hidden, k)


def toy_env(n, k=3, domain_id=0, seed=0, channels=1, side=4, role="client"):
    """Random-pixel environment with balanced labels, for protocol tests."""
    rng = np.random.default_rng([seed, domain_id])
    x = rng.uniform(0, 1, size=(n, channels, side, side))
    y = np.arange(n) % k
    return dt.Environment(
        x=x, y=y, domain_id=domain_id, shift_kind="rotated", shift_param=0.0, role=role,
        source_ids=np.arange(n) + 1000 * domain_id, color=np.full(n, -1), angle=np.zeros(n, dtype=np.int64),
        digit=y, n_classes=k,
    )


@pytest.fixture(scope="session")
def digits_2k():
    return dt.synth_fallback(2000, 0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
