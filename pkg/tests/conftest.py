import time

import pytest
from threadpoolctl import threadpool_limits

from cohnet.surrogate import build_nsm_dataset, train_nsm

DEFAULT_KZ = (0.06, 0.09, 0.12)


@pytest.fixture(scope="session")
def dense_grid():
    return build_nsm_dataset(DEFAULT_KZ, grid_n=200)


@pytest.fixture(scope="session")
def trained_nsm(dense_grid):
    """Default surrogate on the dense grid, trained single-threaded and timed."""
    t0 = time.perf_counter()
    with threadpool_limits(limits=1):
        nsm, report = train_nsm(dense_grid, seed=0)
    return nsm, report, time.perf_counter() - t0


@pytest.fixture(scope="session")
def benchmark_nsm():
    """Surrogate as fitted by the benchmarks: 7 kz values over the default range."""
    from cohnet.experiments import nsm_kz_grid

    nsm, report = train_nsm(build_nsm_dataset(nsm_kz_grid([(0.06, 0.12)])), seed=0)
    return nsm, report


_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def criterion():
    """Record an acceptance-criterion outcome: ``criterion(n, ok, detail)``."""

    def record(n: int, ok: bool, detail: str) -> bool:
        _CRITERIA[n] = (bool(ok), detail)
        print(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
