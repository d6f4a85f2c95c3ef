import pytest

_ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    number = getattr(item.function, "criterion", None)
    if number is None:
        return
    detail = dict(item.user_properties).get("detail", "")
    if rep.when == "setup" and rep.skipped:
        _ACCEPTANCE[number] = ("SKIP", str(rep.longrepr[-1]) if isinstance(rep.longrepr, tuple) else "")
    elif rep.when == "call":
        if rep.skipped and hasattr(rep, "wasxfail"):
            status = "FAIL"
            detail = f"{detail} (known failure: {rep.wasxfail})".strip()
        elif rep.skipped:
            status = "SKIP"
            detail = str(rep.longrepr[-1]) if isinstance(rep.longrepr, tuple) else detail
        else:
            status = "PASS" if rep.passed else "FAIL"
        _ACCEPTANCE[number] = (status, detail)
    elif rep.failed and number not in _ACCEPTANCE:
        _ACCEPTANCE[number] = ("FAIL", f"error during {rep.when}")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {detail}")
