import numpy as np
import pytest

from dagsched.simcore import Server
from dagsched.trace import ApplicationDag, StageSpec


def fig1_app(app_id=0, arrival=0.0, works=(1.0, 1.0, 1.0, 1.0, 1.0), counts=(1, 1, 1, 1, 1)):
    """J1 -> {J2, J3, J4} -> J5 as stages 0 -> {1, 2, 3} -> 4."""
    parents = [(), (0,), (0,), (0,), (1, 2, 3)]
    return ApplicationDag(app_id, arrival, tuple(
        StageSpec(i, counts[i], works[i], 0.0, parents[i]) for i in range(5)))


def chain_app(n, app_id=0, arrival=0.0, work=1.0, tasks=1):
    return ApplicationDag(app_id, arrival, tuple(
        StageSpec(i, tasks, work, 0.0, (i - 1,) if i else ()) for i in range(n)))


def single_app(work=5.0, tasks=1, app_id=0, arrival=0.0):
    return ApplicationDag(app_id, arrival, (StageSpec(0, tasks, work, 0.0, ()),))


@pytest.fixture
def desk_servers():
    return [Server(0, 2.0, 4), Server(1, 1.0, 8)]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def observe_arrived(dags, servers, actions=()):
    """Observation after every app in `dags` has arrived and `actions` were applied."""
    from dagsched.simcore import advance, apply_action, init_cluster, observe, submit
    state = submit(init_cluster(servers), dags)
    while state.event_queue and state.event_queue[0][1] == 1:
        advance(state)
    for a in actions:
        apply_action(state, a)
    return observe(state)


# acceptance criteria record one line each; printed after the run
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
