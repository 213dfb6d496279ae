import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", parent=settings.get_profile("default"), max_examples=500)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_verdicts: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or rep.skipped:
        return
    number, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    # a failure in setup, call or teardown all count against the criterion
    if rep.failed:
        crash = getattr(rep.longrepr, "reprcrash", None)
        _verdicts[number] = ("FAIL", title, detail or (crash.message if crash else f"failed in {rep.when}"))
    elif rep.when == "call":
        _verdicts[number] = ("PASS", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_verdicts):
        status, title, detail = _verdicts[number]
        terminalreporter.write_line(f"{status} criterion {number}: {title} [{detail}]")
