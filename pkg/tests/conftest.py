import pytest

ACCEPTANCE: dict = {}


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for an acceptance criterion; FAIL unless ``ok`` is called."""
    class Line:
        def __init__(self, number):
            self.number, self.detail, self.passed = number, "", False

        def ok(self, detail=""):
            self.passed, self.detail = True, detail

        def note(self, detail):
            self.detail = detail

    line = Line(request.node.get_closest_marker("criterion").args[0])
    ACCEPTANCE[line.number] = line
    yield line


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        line = ACCEPTANCE[n]
        status = "PASS" if line.passed else "FAIL"
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {line.detail}")
