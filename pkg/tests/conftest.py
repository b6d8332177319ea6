import numpy as np
import pytest

from seqsplat.datagen import build_dataset
from seqsplat.raster import Camera
from seqsplat.scene import GaussianScene, quat_normalize


def random_scene(rng, n, spread=1.0, scale=(0.02, 0.15), opacity=(0.2, 0.95)):
    pos = rng.normal(0.0, spread, (n, 3))
    rot = quat_normalize(rng.normal(size=(n, 4)))
    scales = rng.uniform(scale[0], scale[1], (n, 3))
    opac = rng.uniform(opacity[0], opacity[1], n)
    sh = rng.normal(0.0, 1.0, (n, 3))
    return GaussianScene(pos, rot, scales, opac, sh)


def random_camera(rng, width=24, height=20, distance=4.0):
    az = rng.uniform(0, 2 * np.pi)
    el = rng.uniform(-0.6, 0.6)
    eye = distance * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    f = rng.uniform(15, 30)
    return Camera.look_at(eye, (0, 0, 0), fx=f, fy=f * rng.uniform(0.9, 1.1), cx=width / 2,
                          cy=height / 2, width=width, height=height, near=0.1, far=20.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def default_dataset():
    return build_dataset()


@pytest.fixture(scope="session")
def train_samples(default_dataset):
    return [s for s in default_dataset if s.split == "train"]


SMALL_MODEL = {
    "encoder": {"d_model": 16, "point_widths": [8, 16], "head_hidden": 24},
    "planner": {"layers": 1, "heads": 2, "d_model": 16, "context": 96},
    "decoder": {"d_model": 16, "scales": 2, "d_sem": 16},
}


@pytest.fixture(scope="session")
def small_model_config():
    from seqsplat.model import ModelConfig

    return ModelConfig.from_dict(SMALL_MODEL)


@pytest.fixture(scope="session")
def small_dataset():
    from seqsplat.datagen import GenConfig

    data = build_dataset(GenConfig(scenes=2, seed=5, split_ratio=0.5, sequences_per_scene=2))
    return data


@pytest.fixture(scope="session")
def default_pretrain(default_dataset):
    """One pre-training run with the default configuration, shared by several tests."""
    import time

    from seqsplat.train import TrainConfig, run_pretrain

    t0 = time.perf_counter()
    result = run_pretrain(default_dataset, TrainConfig())
    return result, time.perf_counter() - t0


# -- acceptance report --------------------------------------------------------------------
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
