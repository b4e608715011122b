import re
import socket
from pathlib import Path

import pytest

from a2l.rollout import load_scenario

FIXTURES = Path(__file__).parent / "fixtures"
REPO = Path(__file__).parent.parent

_criteria: dict[int, tuple[str, str]] = {}
_NAME = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")


@pytest.fixture
def fixtures() -> Path:
    return FIXTURES


@pytest.fixture
def pick_up_env():
    return load_scenario("pick_up").make_env(0)


@pytest.fixture
def no_network(monkeypatch):
    def refuse(*args, **kwargs):
        raise OSError("network access is disabled in this test")

    monkeypatch.setattr(socket.socket, "connect", refuse)
    monkeypatch.setattr(socket, "create_connection", refuse)


def pytest_runtest_logreport(report):
    m = _NAME.search(report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    label = m.group(2).replace("_", " ")
    if report.when == "call" or report.failed:
        prev = _criteria.get(n, (label, "PASS"))[1]
        status = "FAIL" if report.failed or prev == "FAIL" else "PASS"
        _criteria[n] = (label, status)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        label, status = _criteria[n]
        terminalreporter.write_line(f"criterion {n}: {status}  ({label})")
