import numpy as np
import pytest
from hypothesis import settings

from metaseg import tensor as T

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture(autouse=True)
def float64_mode():
    # correctness tests run in 64-bit with an empty tape
    T.set_precision("float64")
    T.tape.clear()
    yield
    T.set_precision("float64")
    T.set_check_finite(False)
    T.tape.clear()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request, capsys):
    """Record one acceptance line: printed immediately and again in the summary."""

    def record(number: int, name: str, passed: bool, detail: str = ""):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {name}  {detail}".rstrip()
        request.config.stash.setdefault(_ACCEPTANCE, []).append((number, line))
        with capsys.disabled():
            print("\n" + line, flush=True)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda x: x[0]):
            terminalreporter.write_line(line)
