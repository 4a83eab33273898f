import pytest

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(name): release acceptance criterion")


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    marker = item.get_closest_marker("acceptance")
    if marker is not None and (rep.when == "call" or rep.failed):
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        prev = _ACCEPTANCE.get(marker.args[0])
        ok = rep.passed and (prev is None or prev[0])
        details = [d for d in ((prev[1] if prev else ""), detail) if d]
        _ACCEPTANCE[marker.args[0]] = (ok, "; ".join(details))
    return rep


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in _ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))
