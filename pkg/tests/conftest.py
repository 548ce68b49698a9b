import time

import pytest

from spmpinn.network import Architecture
from spmpinn.params import load_default


@pytest.fixture(scope="session")
def cell():
    return load_default()


@pytest.fixture(scope="session")
def tiny_arch():
    return Architecture(branch=(4, 6), trunk=(3, 6), head=(6, 5, 1))


@pytest.fixture(scope="session")
def small_arch():
    return Architecture(branch=(8, 16), trunk=(3, 16), head=(16, 16, 1))


_ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, ok, detail)``; also asserts ``ok``."""
    lines = request.config.stash[_ACCEPTANCE_KEY]

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def desk_models(cell):
    """Phase-1 models at the default (desk-scale) training configuration, with wall time."""
    from spmpinn.pretrain import TrainConfig, init_models, train

    cfg = TrainConfig()
    t0 = time.perf_counter()
    models, history = train(*init_models(cell, cfg), cell, cfg)
    return {"models": models, "history": history, "wall": time.perf_counter() - t0}
