import pytest

_verdicts = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when != "call" and not report.failed:
        return
    number, title = marker.args
    detail = dict(report.user_properties).get("detail", "")
    passed = report.passed and _verdicts.get(number, (True,))[0]
    _verdicts[number] = (passed, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_verdicts):
        passed, title, detail = _verdicts[number]
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
