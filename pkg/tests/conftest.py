import numpy as np
import pytest

from ristrack.protocol import generate_dataset
from ristrack.scenarios import apply_delta, default_source, desk_scale


def tiny_scenario(name=None):
    sc = desk_scale(default_source(), n_subcarriers=(4, 4), n_frames=(10, 10), ris_side=2, n_rx=2)
    if name is not None:
        sc = apply_delta(sc, name)
    return sc


@pytest.fixture(scope="session")
def tiny():
    return tiny_scenario()


@pytest.fixture(scope="session")
def tiny_source(tiny):
    sc = tiny.replace_band(0, p_ul=0.5).replace_band(1, p_ul=0.5)
    return generate_dataset(sc, 20, labeled_fraction=1.0, seed=3)


@pytest.fixture(scope="session")
def tiny_target(tiny_source):
    sc = apply_delta(tiny_source.scenario, "RMV")
    return generate_dataset(sc, 20, labeled_fraction=0.25, seed=4, domain="target")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def criterion():
    """Record one PASS/FAIL line per acceptance criterion; returns ``ok``."""
    def record(cid, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {cid}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
