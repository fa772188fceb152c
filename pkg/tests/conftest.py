import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from rave import _kernels  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["numba", "numpy"])
def kernel_backend(request):
    prev = _kernels.use_backend(request.param)
    yield request.param
    _kernels.use_backend(prev)


_CRITERIA = pytest.StashKey[list]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): test that decides one acceptance criterion")
    config.stash[_CRITERIA] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = dict(item.user_properties).get("detail", "")
        item.config.stash[_CRITERIA].append((marker.args[0], rep.passed, detail))


def pytest_terminal_summary(terminalreporter, config):
    rows = config.stash.get(_CRITERIA, [])
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in rows:
        line = f"{'PASS' if ok else 'FAIL'}  {name}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)
