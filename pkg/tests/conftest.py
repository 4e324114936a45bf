import numpy as np
import pytest

from eecmdp.harness import Scenario, run_solve
from eecmdp.solver import DiscountedMdp

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when != "call":
        return
    number, title = mark.args
    detail = ""
    if report.failed:
        detail = str(call.excinfo.value).splitlines()[0] if call.excinfo else ""
    _CRITERIA[number] = (title, "PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[number]
        line = f"{status}  [{number}] {title}"
        if detail:
            line += f"  -- {detail}"
        terminalreporter.write_line(line)


def random_mdp(rng, num_states, num_actions, discount=0.9, constraints=1,
               action_dependent=False):
    shape = (num_states, num_actions, num_states) if action_dependent else (num_states, num_states)
    p = rng.random(shape)
    p /= p.sum(axis=-1, keepdims=True)
    return DiscountedMdp(p, rng.random((num_states, num_actions)),
                         rng.random((constraints, num_states, num_actions)), discount)


@pytest.fixture(scope="session")
def default_outcome():
    return run_solve(Scenario())
