import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "metaexo", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("metaexo")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(tag, title): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        tag, title = marker.args
        detail = dict(item.user_properties).get("detail", "")
        item.config._criteria = getattr(item.config, "_criteria", {})
        item.config._criteria[tag] = (title, "PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter, config):
    criteria = getattr(config, "_criteria", {})
    if not criteria:
        return
    terminalreporter.section("acceptance criteria")
    for tag in sorted(criteria, key=lambda t: int(t[2:])):
        title, status, detail = criteria[tag]
        line = f"{tag} {status}  {title}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)
