"""Prints one line per acceptance criterion at the end of the run."""

_results = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    failed = report.failed
    if report.when == "call" or failed:
        name = report.nodeid.split("::")[-1]
        prev = _results.get(name)
        status = "FAIL" if failed else ("SKIP" if report.skipped else "PASS")
        if prev is None or prev[0] == "PASS":
            _results[name] = (status, dict(report.user_properties).get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_results):
        status, detail = _results[name]
        label = name.removeprefix("test_").replace("_", " ")
        terminalreporter.write_line(f"{status}  {label}")
        for line in str(detail).splitlines():
            terminalreporter.write_line(f"      {line}")
