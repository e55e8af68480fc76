import pytest

# (criterion number, title) -> (verdict, detail), filled by the hook below
_VERDICTS: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.fixture
def detail(request):
    """Mutable list of strings appended to the criterion's summary line."""
    notes: list[str] = []
    request.node._criterion_detail = notes
    return notes


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    if hasattr(rep, "wasxfail"):
        verdict = "FAIL (expected, see decisions ledger)"
    elif rep.passed:
        verdict = "PASS"
    elif rep.skipped:
        verdict = "SKIP"
    else:
        verdict = "FAIL"
    notes = "; ".join(getattr(item, "_criterion_detail", []))
    _VERDICTS[tuple(mark.args)] = (verdict, notes)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for (num, title), (verdict, notes) in sorted(_VERDICTS.items(), key=lambda kv: str(kv[0][0])):
        line = f"criterion {num} [{title}]: {verdict}"
        terminalreporter.write_line(line + (f" -- {notes}" if notes else ""))
