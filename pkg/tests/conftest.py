from collections import defaultdict

_criteria = defaultdict(list)


def pytest_runtest_logreport(report):
    marks = dict(report.user_properties).get("criterion")
    if marks is None:
        return
    if report.when == "call" or report.outcome != "passed":
        _criteria[marks].append(report.outcome)


def pytest_runtest_setup(item):
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        item.user_properties.append(("criterion", mark.args[0]))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        outcomes = _criteria[n]
        ok = all(o == "passed" for o in outcomes)
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} ({len(outcomes)} checks)")
