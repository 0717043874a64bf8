"""Per-criterion pass/fail summary for tests marked ``@pytest.mark.criterion(n, title)``."""

import pytest

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")
    config.addinivalue_line("markers", "slow: long-running training check")


@pytest.fixture
def detail(request):
    """Attach a measured-value note to the criterion line of the summary."""
    marker = request.node.get_closest_marker("criterion")

    def note(text: str) -> None:
        _RESULTS.setdefault(marker.args[0], {"title": marker.args[1]})["detail"] = text

    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    entry = _RESULTS.setdefault(marker.args[0], {"title": marker.args[1]})
    entry["passed"] = entry.get("passed", True) and report.passed


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        entry = _RESULTS[number]
        status = "PASS" if entry.get("passed") else "FAIL"
        line = f"criterion {number:2d} {status}  {entry['title']}"
        if entry.get("detail"):
            line += f"  [{entry['detail']}]"
        terminalreporter.write_line(line)
