import pytest

from ablab import _jit

_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    """Run a test under both kernel backends."""
    previous = _jit.backend()
    _jit.set_backend(request.param)
    yield request.param
    _jit.set_backend(previous)


@pytest.fixture
def report(request):
    """Record one acceptance line; the test then asserts the same verdict."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def record(number: int, ok: bool, text: str) -> bool:
        line = f"[{number:02d}] {'PASS' if ok else 'FAIL'}  {text}"
        lines.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines):
        terminalreporter.write_line(line)
