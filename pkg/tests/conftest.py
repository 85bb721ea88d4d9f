import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

FIXTURES = Path(__file__).parent / "fixtures"

_criteria = {}
_notes = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion the test gates")
    config.addinivalue_line("markers", "slow: long-running training experiment")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None or rep.when != "call" and not (rep.when == "setup" and rep.outcome != "passed"):
        return
    n, text = m.args
    status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
    prev = _criteria.get(n, (text, []))
    prev[1].append((item.name, status))
    _criteria[n] = prev


def pytest_terminal_summary(terminalreporter):
    if _notes:
        terminalreporter.section("experiment reports")
        for line in _notes:
            terminalreporter.write_line(line)
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        text, results = _criteria[n]
        statuses = {s for _, s in results}
        overall = "FAIL" if "FAIL" in statuses else ("SKIP" if statuses == {"SKIP"} else "PASS")
        terminalreporter.write_line(f"[{overall}] AC{n}: {text} ({len(results)} check(s))")


@pytest.fixture
def note():
    """Append lines to the end-of-run report."""
    return _notes.append


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


def to_np(t):
    return t.detach().cpu().double().numpy()
