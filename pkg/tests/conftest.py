import pytest

_RESULTS = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None and (rep.when == "call" or (rep.when == "setup" and rep.failed)):
        detail = getattr(item, "criterion_detail", "")
        _RESULTS.append((marker.args[0], rep.passed, rep.duration, detail))
    return rep


@pytest.fixture
def detail(request):
    """Callable that attaches a short measurement string to the summary line."""
    def record(text):
        request.node.criterion_detail = text
    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, secs, text in _RESULTS:
        extra = f"  [{text}]" if text else ""
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  ({secs:.1f} s){extra}")
