from __future__ import annotations

import pytest

from lofitts.pipeline import PipelineConfig, init_pipeline
from lofitts.sensitivity import per_layer_sweep

_criteria: list[tuple[int, str, str, float]] = []


@pytest.fixture(scope="session")
def pipeline():
    return init_pipeline(PipelineConfig())


@pytest.fixture(scope="session")
def sweep(pipeline):
    return per_layer_sweep(pipeline)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        number, title = marker.args
        _criteria.append((number, title, report.outcome, report.duration))


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, outcome, duration in sorted(_criteria):
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2}: {verdict}  {title} ({duration:.2f}s)")
