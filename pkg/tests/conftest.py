import pytest

from . import acceptance_log


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): numbered acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not acceptance_log.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acceptance_log.LINES):
        terminalreporter.write_line(acceptance_log.LINES[n])


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("acceptance")
    return acceptance_log.Criterion(marker.args[0], request.node.name)
