import numpy as np
import pytest

from sadm.schedule import ScheduleConfig, build_schedule


@pytest.fixture(scope="session")
def default_schedule():
    return build_schedule(ScheduleConfig())


@pytest.fixture(scope="session")
def short_schedule():
    return build_schedule(ScheduleConfig(total_steps=100))


@pytest.fixture(scope="session")
def ddpm_schedule():
    return build_schedule(ScheduleConfig(degenerate_ddpm=True))


@pytest.fixture
def rng():
    return np.random.default_rng(20241017)


# ---------------------------------------------------------------- acceptance log

_ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = {}
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.fixture
def record(request):
    """Log one PASS/FAIL line for the criterion of the calling test."""
    marker = request.node.get_closest_marker("criterion")
    log = request.config.stash[_ACCEPTANCE]

    def _record(title, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {marker.args[0]:>2}: {title} :: {detail}"
        log[marker.args[0]] = line
        print(line)
        return passed

    return _record


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call" or call.excinfo is None:
        return
    log = item.config.stash[_ACCEPTANCE]
    n = marker.args[0]
    if n not in log:
        log[n] = f"[FAIL] criterion {n:>2}: {item.name} :: raised {call.excinfo.typename}"


def pytest_terminal_summary(terminalreporter, config):
    log = config.stash.get(_ACCEPTANCE, {})
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(log):
        terminalreporter.write_line(log[n])
