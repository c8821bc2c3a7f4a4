import pytest

from objdrive.simworld.world import spawn_scenario


def empty_world(kind="highway", seed=0, template=None):
    """A scenario with every other road user removed and the ego at rest."""
    w = spawn_scenario(kind, seed, template)
    w.agents = []
    w.ego.speed = 0.0
    return w


@pytest.fixture
def highway_empty():
    return empty_world("highway", 0)


# one summary line per acceptance criterion, filled in by test_acceptance
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
