import pytest

from haocl.bench import local_config
from haocl.daemon import NodeDaemon


@pytest.fixture
def inproc_cluster():
    """Factory: start daemons in this process for a per-node device list."""
    started = []

    def make(devices_per_node, static_map=None):
        config = local_config(devices_per_node, static_map=static_map)
        daemons = [NodeDaemon(n.endpoint, n.devices, n.name).start() for n in config.nodes]
        started.extend(daemons)
        return config, daemons

    yield make
    for d in started:
        d.stop()


# -- acceptance summary -------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL"
        detail = dict(item.user_properties).get("detail", "")
        if rep.skipped and isinstance(rep.longrepr, tuple):
            detail = rep.longrepr[2].removeprefix("Skipped: ")
        elif rep.failed:
            detail = str(rep.longrepr).strip().splitlines()[-1][:160]
        _CRITERIA[mark.args[0]] = (mark.args[1], status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[n]
        line = f"criterion {n:2d} {status}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
