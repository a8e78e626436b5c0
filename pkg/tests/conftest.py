import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from rnnvo.nets import NetConfig  # noqa: E402
from rnnvo.synthetic import PlaneScene, make_sequence, write_scene  # noqa: E402


def small_config(**kw) -> NetConfig:
    """Shallow 16x24 networks, fast enough for unit tests."""
    base = dict(height=16, width=24, width_scale=1 / 16)
    base.update(kw)
    return NetConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_scene():
    scene = PlaneScene(height=16, width=24, K=PlaneScene().K.scaled(24 / 96, 16 / 64))
    return make_sequence(12, scene, step=(0.1, 0.0, 0.05))


@pytest.fixture
def dataset_root(tmp_path, small_scene):
    write_scene(tmp_path, "scene_a", small_scene)
    return tmp_path


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, _, line in sorted(RESULTS):
        terminalreporter.write_line(line)
