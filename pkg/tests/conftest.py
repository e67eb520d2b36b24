import pytest

from ddnav.world import default_ontology, generate_scene, scene_from_rows, SceneConfig


def open_room(width, depth):
    """Rows (top to bottom) of a walled rectangle with a free interior."""
    inner = "#" + "." * (width - 2) + "#"
    return ["#" * width] + [inner] * (depth - 2) + ["#" * width]


@pytest.fixture(scope="session")
def ontology():
    return default_ontology()


@pytest.fixture
def room():
    return scene_from_rows(open_room(12, 12), [("WaterBottle_1", "WaterBottle", [(5, 8)])],
                           spawn_points=[(5, 2)], name="room")


@pytest.fixture
def corridor():
    # 1-wide corridor along x, water bottle at the far end
    rows = ["###################", "#................O#", "###################"]
    return scene_from_rows(rows, [("WaterBottle_1", "WaterBottle", [(17, 1)])], spawn_points=[(1, 1)],
                           name="corridor")


@pytest.fixture(scope="session")
def small_scenes():
    return [generate_scene(s, SceneConfig(width=12, depth=12)) for s in range(30)]
