from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings
from threadpoolctl import threadpool_limits

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session", autouse=True)
def single_thread():
    # golden files and byte-identity checks assume the single-threaded BLAS path
    with threadpool_limits(limits=1):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def data_dir():
    return DATA


VERDICTS: dict[int, str] = {}


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records one verdict line and fails the test when ``ok`` is false."""
    seen = []

    def record(n: int, ok: bool, detail: str) -> None:
        seen.append(n)
        VERDICTS[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(VERDICTS[n])
        assert ok, detail

    yield record
    if not seen:  # the test raised before reaching its verdict
        n = int(request.node.name.split("_")[1])
        VERDICTS[n] = f"criterion {n:2d}: FAIL  raised before a verdict"


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
