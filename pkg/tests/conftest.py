import copy

import pytest

SMALL = {
    "name": "small",
    "seed": 3,
    "horizon": "6h",
    "fleet": {"generate": {"scale": 0.002, "config": {
        "service_counts": {"T0": 3, "T1": 10, "T2": 10, "T3": 10, "T4": 3, "T5": 3, "NP": 6},
        "n_cities": 12,
        "batch_capacity_factor": 0.9,
        "failclose_fractions": {"AO->RL": 0.0, "AM->RL": 0.0, "any->T": 0.0, "other": 0.3},
    }}},
    "world": {
        "requests_per_tick": 5,
        "spawner": {"conversion_rate": 100, "eviction_delay": "1m"},
        "cloud_quotas": {f"region{r}-z{i}": 100 for r in "AB" for i in range(3)},
    },
    "events": [
        {"at": "1h", "type": "failover", "from": "regionA", "to": "regionB"},
        {"at": "3h", "type": "failback"},
    ],
}


@pytest.fixture
def small_scenario():
    """A ~50-service two-region scenario that runs a peak failover and failback in about two seconds."""
    return copy.deepcopy(SMALL)


@pytest.fixture(scope="session")
def small_run():
    from ufasim.harness import ScenarioConfig, run_scenario
    return run_scenario(ScenarioConfig.from_dict(copy.deepcopy(SMALL)))


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
