import numpy as np
import pytest

from tacomap.field import FieldConfig, FieldModel
from tacomap.world import SceneStage, Segment, SensorSpec, Shape, observe, room_walls

TINY = FieldConfig(levels=2, base_resolution=4, hidden_width=8, latent_dim=4, bins=8)


@pytest.fixture
def tiny_model():
    return FieldModel(TINY)


@pytest.fixture
def tiny_theta(tiny_model):
    rng = np.random.default_rng(0)
    theta = tiny_model.init_params(rng)
    n = tiny_model.layout.grid_len
    theta[:n] = rng.uniform(-0.3, 0.3, n)  # give the grid real signal
    return theta


def disk_room():
    shapes = room_walls(((0.0, 0.0), (1.0, 1.0)), 0.1) + [Shape("disk", (0.5, 0.5), (0.15,), (0.9, 0.2, 0.1))]
    return SceneStage(shapes, 0)


def orbit_sensor(rays=32, steps=8):
    seg = Segment(steps, orbit=(0.5, 0.5, 0.3, 0.0, 360.0), look_at=(0.5, 0.5))
    return SensorSpec((seg,), fov=np.pi / 2, rays_per_frame=rays, depth_noise_sigma=0.0, max_range=1.5)


def make_batch(step=0, rays=32, seed=0):
    return observe(disk_room(), orbit_sensor(rays), step, np.random.default_rng(seed))


@pytest.fixture
def batch():
    return make_batch()


# one line per acceptance criterion, echoed again at the end of the session
ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[1])):
            terminalreporter.write_line(ACCEPTANCE[key])
