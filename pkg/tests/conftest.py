import numpy as np
import pytest

from chipqkd.calibration import calibrate
from chipqkd.chip import ChipParams
from chipqkd.link import LinkParams
from chipqkd.protocol import ProtocolParams


@pytest.fixture(scope="session")
def chip():
    return ChipParams()


@pytest.fixture(scope="session")
def cal(chip):
    return calibrate(chip)


@pytest.fixture(scope="session")
def lp():
    return LinkParams()


@pytest.fixture(scope="session")
def pp():
    return ProtocolParams()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """record(number, ok, detail): one PASS/FAIL line per acceptance criterion."""

    def record(number, title, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number:>2} {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[2])):
            terminalreporter.write_line(line)
