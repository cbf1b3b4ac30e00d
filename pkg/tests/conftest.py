import numpy as np
import pytest

from surfdist.synthetic import ObjectSpec, default_camera, make_object

_OBJECTS = {}


def get_object(kind: str, sample_count: int = 4096):
    key = (kind, sample_count)
    if key not in _OBJECTS:
        _OBJECTS[key] = make_object(ObjectSpec(kind), sample_count)
    return _OBJECTS[key]


@pytest.fixture(scope="session")
def blob():
    return get_object("blob")


@pytest.fixture(scope="session")
def cylinder():
    return get_object("cylinder")


@pytest.fixture(scope="session")
def camera():
    return default_camera()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# One line per acceptance criterion, printed in the terminal summary.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
