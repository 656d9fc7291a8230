import contextlib

import pytest

# criterion number -> (description, passed, detail)
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@contextlib.contextmanager
def criterion(number: int, description: str):
    """Record the outcome of one acceptance criterion; failures still raise."""
    note = {"detail": ""}
    try:
        yield note
    except BaseException:
        ACCEPTANCE[number] = (description, False, note["detail"])
        raise
    ACCEPTANCE[number] = (description, True, note["detail"])


@pytest.fixture
def acceptance():
    return criterion


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        desc, ok, detail = ACCEPTANCE[n]
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {desc}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
