"""Collects acceptance verdicts and prints them at the end of the session."""

import pytest

_VERDICTS: list[tuple[str, str, str]] = []


def _tag(ok):
    return "NOTE" if ok is None else ("PASS" if ok else "FAIL")


@pytest.fixture
def verdict():
    """Record one acceptance line; the calling test still asserts on `ok`.

    `ok=None` records an informational line that carries no verdict.
    """

    def record(name: str, ok, detail: str = ""):
        _VERDICTS.append((_tag(ok), name, detail))
        print(f"{_tag(ok)}  {name}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance")
    for tag, name, detail in _VERDICTS:
        terminalreporter.write_line(f"{tag}  {name}: {detail}")
