import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, summary): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, summary = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        props = dict(report.user_properties)
        _RESULTS[number] = (summary, report.outcome, props)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_RESULTS):
        summary, outcome, props = _RESULTS[number]
        status = "PASS" if outcome == "passed" else "FAIL"
        extra = ""
        if "deviation" in props:
            label = "max run seconds" if number == 11 else "mismatches" if number == 9 else "max deviation"
            extra = f"  [{label} {props['deviation']:.3e}]"
        tr.write_line(f"criterion {number:>2}: {status}  {summary}{extra}")
