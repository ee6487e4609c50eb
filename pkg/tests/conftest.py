import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("s4c", deadline=None, max_examples=40)
settings.load_profile("s4c")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion checked by this test")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    detail = dict(item.user_properties).get("detail", "")
    item.config._criteria.setdefault(mark.args[0], []).append((item.name, rep.passed, detail))


def pytest_terminal_summary(terminalreporter, config):
    crit = getattr(config, "_criteria", {})
    if not crit:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(crit):
        ok = all(passed for _, passed, _ in crit[n])
        details = "; ".join(d for _, _, d in crit[n] if d)
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {details}")
