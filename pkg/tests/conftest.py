import numpy as np
import pytest

CRITERIA = {
    1: "gradient suite",
    2: "conv and DIC oracle equivalence",
    3: "regression identities",
    4: "constant offset formula",
    5: "metric oracles",
    6: "overfit run",
    7: "DOP directional ablation",
    8: "cost accounting",
    9: "format round-trips",
}
_outcomes: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-minute training runs")
    config.addinivalue_line("markers", "criterion(n): acceptance criterion exercised by the test")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or rep.failed or rep.skipped:
        _outcomes.setdefault(mark.args[0], []).append((item.name, rep.when, rep.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, title in CRITERIA.items():
        runs = _outcomes.get(n)
        if not runs:
            tr.write_line(f"criterion {n} ({title}): NOT RUN")
            continue
        bad = [f"{name} [{when}: {out}]" for name, when, out in runs if out != "passed"]
        status = "PASS" if not bad else "FAIL"
        tr.write_line(f"criterion {n} ({title}): {status}" + (f"  {'; '.join(bad)}" if bad else ""))
