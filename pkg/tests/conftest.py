import numpy as np
import pytest

from focalfield.dataset import render_dataset
from focalfield.scene import make_two_district_scene, two_district_cameras
from focalfield.trainer import TrainConfig, train_global

# small enough to train in seconds, big enough to learn the two districts
TINY = dict(global_steps=300, focal_steps_per_block=100, batch_rays=256, step_scale=2.0, initial_depth=2,
            max_depth=3, refine_every=100, base_resolution=4, max_resolution=32, levels=4,
            log2_table_size=12, hidden_density=32, hidden_color=32, error_map_refresh=50)


@pytest.fixture(scope="session")
def tiny_dataset():
    scene = make_two_district_scene(4, seed=0)
    cams, boundary = two_district_cameras(8, 1, 1, 16, 16)
    return render_dataset(scene, cams, 256, boundary)


@pytest.fixture(scope="session")
def tiny_config():
    return TrainConfig(**TINY)


@pytest.fixture(scope="session")
def tiny_global(tiny_dataset, tiny_config):
    return train_global(tiny_dataset, tiny_config)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# acceptance criteria report: each criterion test records one line, printed
# in the terminal summary so it lands in captured logs regardless of -s
def pytest_configure(config):
    config._criteria = {}


@pytest.fixture
def criterion(request):
    def record(n: int, ok: bool, detail: str) -> bool:
        request.config._criteria[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_criteria", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
