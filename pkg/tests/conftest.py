import contextlib

import pytest

_CRITERIA = {}


class CriterionRecorder:
    @contextlib.contextmanager
    def __call__(self, number, title):
        details = {}
        try:
            yield details
        except BaseException:
            _CRITERIA[number] = (title, False, details)
            raise
        _CRITERIA[number] = (title, True, details)


@pytest.fixture(scope="session")
def criterion():
    return CriterionRecorder()


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, details = _CRITERIA[n]
        extra = " ".join(f"{k}={_fmt(v)}" for k, v in details.items())
        terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}: {title} {extra}".rstrip())
