import time
from contextlib import contextmanager

import pytest
import torch

# one intra-op thread keeps float reductions bit-reproducible across runs
torch.set_num_threads(1)

_ACCEPTANCE: dict[int, str] = {}


class _Check:
    def __init__(self, number: int, title: str, budget: float):
        self.number, self.title, self.budget = number, title, budget
        self.detail = ""
        # work done outside the block (e.g. a shared sweep fixture) is charged here
        self.measured: float | None = None


def _elapsed(check: _Check, t0: float) -> float:
    wall = time.perf_counter() - t0
    return wall if check.measured is None else check.measured + wall


@contextmanager
def _criterion(number: int, title: str, budget: float):
    check = _Check(number, title, budget)
    t0 = time.perf_counter()
    status = "FAIL"
    try:
        yield check
        elapsed = _elapsed(check, t0)
        assert elapsed <= budget, f"runtime {elapsed:.1f}s exceeds {budget:.0f}s"
        status = "PASS"
    except BaseException as exc:
        check.detail = f"{check.detail} | {type(exc).__name__}: {exc}".strip(" |")
        raise
    finally:
        elapsed = _elapsed(check, t0)
        _ACCEPTANCE[number] = (f"criterion {number:2d} {status}  {title}  "
                               f"[{elapsed:.1f}s / {budget:.0f}s]  {check.detail}")
        print(_ACCEPTANCE[number])


@pytest.fixture
def criterion():
    return _criterion


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
