"""Shared fixtures.

Oracle tags used in comments: [TRIVIAL] values follow from a definition,
[DERIVED] values come from an independent computation in the test, and
[PUBLISHED] values are experimental parameters of the reference setup.
"""

import numpy as np
import pytest

from pairtrace import kernels


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    with kernels.using(request.param):
        yield request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.acceptance = {}


@pytest.fixture
def verdict(request):
    """Record one acceptance line: ``verdict(n, ok, detail)``; asserts ``ok``."""

    def record(n: int, ok: bool, detail: str):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.acceptance[n] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(config.acceptance):
            terminalreporter.write_line(config.acceptance[n])
