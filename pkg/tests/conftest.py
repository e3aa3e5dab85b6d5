import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def runs_dir(tmp_path, monkeypatch):
    d = tmp_path / "runs"
    monkeypatch.setenv("ICCR_RUNS_DIR", str(d))
    return d


# one line per acceptance criterion, printed in the terminal summary
_CRITERIA: dict[str, tuple[str, bool, str]] = {}
_OUTCOMES: dict[str, str] = {}


@pytest.fixture
def criterion(request):
    def record(name: str, ok: bool, detail: str) -> None:
        _CRITERIA[request.node.nodeid] = (name, bool(ok), detail)
        assert ok, f"{name}: {detail}"
    return record


def pytest_runtest_logreport(report):
    if report.when == "call" or report.outcome != "passed":
        _OUTCOMES.setdefault(report.nodeid, report.outcome)


def pytest_terminal_summary(terminalreporter):
    ids = [i for i in _OUTCOMES if "test_acceptance" in i]
    if not ids:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid in ids:
        if nodeid in _CRITERIA:
            name, ok, detail = _CRITERIA[nodeid]
            terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        else:
            terminalreporter.write_line(f"FAIL  {nodeid.split('::')[-1]}: {_OUTCOMES[nodeid]} before a verdict")
