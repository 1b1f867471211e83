"""Collects acceptance outcomes and prints one line per criterion."""

from collections import defaultdict

_results: dict[int, list] = defaultdict(list)
_titles: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    number, title = marker.args
    _titles[number] = title
    _results[number].append(call.excinfo is None)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        verdict = "PASS" if all(_results[number]) else "FAIL"
        terminalreporter.write_line(f"criterion {number} [{_titles[number]}]: {verdict}")
