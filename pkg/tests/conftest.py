import pytest

# criterion number -> [passed, detail lines]
_VERDICTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not rep.failed:
        return
    n = mark.args[0]
    ok, notes = _VERDICTS.setdefault(n, [True, []])
    _VERDICTS[n][0] = ok and rep.passed
    notes.extend(getattr(item, "acceptance_notes", []))
    if not rep.passed:
        notes.append(f"{item.name} failed")


@pytest.fixture
def note(request):
    """Attach a one-line measurement to the criterion summary."""
    request.node.acceptance_notes = []
    return request.node.acceptance_notes.append


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        ok, notes = _VERDICTS[n]
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}"
        if notes:
            line += "  (" + "; ".join(notes) + ")"
        terminalreporter.write_line(line)
