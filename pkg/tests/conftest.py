from __future__ import annotations

import pytest

from regionseg.geometry import GridSpec
from regionseg.synthetic import SyntheticSpec, make_synthetic_corpus

_ACCEPTANCE: list[tuple[str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(criterion): exit criterion of the build")
    config.addinivalue_line("markers", "live: needs a live MLLM and mask server")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.skipped):
        return
    marker = report.user_properties and dict(report.user_properties).get("criterion")
    if marker:
        outcome = "SKIP" if report.skipped else ("PASS" if report.passed else "FAIL")
        _ACCEPTANCE.append((outcome, marker))


@pytest.fixture(autouse=True)
def _tag_criterion(request):
    m = request.node.get_closest_marker("acceptance")
    if m:
        request.node.user_properties.append(("criterion", m.args[0]))
    yield


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for outcome, name in _ACCEPTANCE:
        terminalreporter.write_line(f"{outcome:4}  {name}")


@pytest.fixture(scope="session")
def grid9():
    return GridSpec(rows=9, cols=9)


@pytest.fixture(scope="session")
def exact_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("syn_exact")
    return make_synthetic_corpus(SyntheticSpec(seed=7, count=12, cover="exact", absent_fraction=0.2), out), out


@pytest.fixture(scope="session")
def half_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("syn_half")
    return make_synthetic_corpus(SyntheticSpec(seed=11, count=12, cover="half"), out), out
