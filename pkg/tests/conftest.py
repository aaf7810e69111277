import pytest

from econsandbox.data import generate_synthetic_market


@pytest.fixture(scope="session")
def small_market():
    return generate_synthetic_market(3, 30, 4, 6)


@pytest.fixture(scope="session")
def small_market_dir(tmp_path_factory, small_market):
    from econsandbox.data import write_market

    d = tmp_path_factory.mktemp("market")
    write_market(small_market, d)
    return d


# One summary line per acceptance criterion, whatever the verbosity.
_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE[report.nodeid] = (report.outcome, dict(report.user_properties))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid in sorted(_ACCEPTANCE):
        outcome, props = _ACCEPTANCE[nodeid]
        name = nodeid.split("::test_criterion_")[1]
        num, _, title = name.partition("_")
        detail = ", ".join(f"{k}={v}" for k, v in props.items())
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {int(num):2d} {title.replace('_', ' ')}: {verdict}"
                                    + (f"  ({detail})" if detail else ""))
