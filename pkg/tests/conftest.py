import pytest
from hypothesis import HealthCheck, settings

from proxytrace.accel.geometry import SceneGeometry
from proxytrace.scene import generate_box_room, generate_mini_island, generate_stress_island

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.load_profile("repo")


@pytest.fixture(scope="session")
def island():
    return generate_mini_island()


@pytest.fixture(scope="session")
def island_geo(island):
    return SceneGeometry(island)


@pytest.fixture(scope="session")
def box_room():
    return generate_box_room()


@pytest.fixture(scope="session")
def box_geo(box_room):
    return SceneGeometry(box_room)


@pytest.fixture(scope="session")
def stress():
    return generate_stress_island()


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
