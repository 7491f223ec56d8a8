import pytest

from muonpath.bfield import ToroidModel
from muonpath.geomodel import default_geometry
from muonpath.toysim import default_rt

# criterion number -> (title, passed, detail), filled by the acceptance tests
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = "; ".join(v for k, v in item.user_properties if k == "detail")
        _CRITERIA[mark.args[0]] = (mark.args[1], rep.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA, key=lambda k: (int(k.rstrip("abc")), k)):
        title, ok, detail = _CRITERIA[n]
        line = f"criterion {n:>3}: {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))


@pytest.fixture(scope="session")
def geom():
    return default_geometry()


@pytest.fixture(scope="session")
def toroid():
    return ToroidModel()


@pytest.fixture(scope="session")
def rt():
    return default_rt()
