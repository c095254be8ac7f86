import pytest

ACCEPTANCE_RESULTS: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion; the outcome comes from the test report."""
    info = {}
    yield info
    ACCEPTANCE_RESULTS.setdefault(request.node.nodeid, (False, info.get("detail", "")))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when == "call" and "criterion" in item.fixturenames:
        detail = item.funcargs["criterion"].get("detail", "")
        ACCEPTANCE_RESULTS[item.nodeid] = (report.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, (passed, detail) in ACCEPTANCE_RESULTS.items():
        name = nodeid.split("::")[-1]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
