import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from ontobn import Ontology  # noqa: E402

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def fixture_path(name):
    return os.path.join(FIXTURES, name)


@pytest.fixture
def chain():
    return Ontology(["Cancer", "LungCancer"], [("Cancer", "LungCancer")])


@pytest.fixture
def diamond():
    return Ontology(list("ABCD"), [("A", "B"), ("A", "C"), ("B", "D"), ("C", "D")])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# One pass/fail line per acceptance criterion, printed after the run.
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
