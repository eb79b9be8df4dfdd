import pytest

_results: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    n, title = marker.args
    entry = _results.setdefault(n, {"title": title, "passed": True, "notes": []})
    entry["passed"] &= report.passed
    if report.failed:
        reason = report.longreprtext.strip().splitlines()[-1] if report.longreprtext.strip() else ""
        entry["notes"].append(f"{item.name} failed: {reason[:160]}")
    entry["notes"] += [str(v) for k, v in report.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        entry = _results[n]
        verdict = "PASS" if entry["passed"] else "FAIL"
        notes = "; ".join(entry["notes"])
        terminalreporter.write_line(f"criterion {n} {verdict}: {entry['title']}" + (f" | {notes}" if notes else ""))
