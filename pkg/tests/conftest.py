import pytest
import torch
from hypothesis import HealthCheck, settings

torch.set_num_threads(1)

settings.register_profile(
    "histf", deadline=None, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("histf")

# criterion number -> (title, list of (test id, passed, detail))
_criteria: dict[int, tuple[str, list]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, (title, []))
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = "; ".join(v for k, v in item.user_properties if k == "detail")
        entry[1].append((item.name, report.outcome == "passed", detail))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, results = _criteria[number]
        ok = bool(results) and all(passed for _, passed, _ in results)
        details = "; ".join(d for _, _, d in results if d)
        line = f"criterion {number:2d} {title}: {'PASS' if ok else 'FAIL'}"
        terminalreporter.write_line(line + (f"  ({details})" if details else ""))
