import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from csgprog.lang import GrammarConfig, build_vocabulary, parse_program  # noqa: E402

NESTED_PROGRAM = ("circle(32,32,28) square(32,40,24) circle(48,32,12) circle(24,32,16) "
                  "union intersect subtract")


@pytest.fixture(scope="session")
def cfg():
    return GrammarConfig()


@pytest.fixture(scope="session")
def vocab(cfg):
    return build_vocabulary(cfg)


@pytest.fixture
def nested_program(cfg):
    return parse_program(NESTED_PROGRAM, cfg)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_RESULTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[n])
