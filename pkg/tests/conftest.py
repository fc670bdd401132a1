import numpy as np
import pytest

from mhformer.config import tiny_config
from mhformer.model import init_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny():
    return tiny_config()


@pytest.fixture
def tiny_params(tiny):
    # perturb away from the near-zero init so every path carries signal
    p = init_params(tiny, seed=3)
    r = np.random.default_rng(7)
    for t in p.tensors():
        t.data = t.data + r.normal(0.0, 0.3, size=t.shape)
    return p


def synthetic_windows(frames=40, seed=0, N=9, skeleton="toy5"):
    """Model-ready (x2d, y3d) windows from one synthetic sequence seen by the default camera."""
    from mhformer import data

    sk = data.get_skeleton(skeleton)
    cam = data.default_camera()
    world = data.synth_generate(sk, frames, seed)
    x = data.model_inputs(data.project(world, cam))
    y = data.model_targets(data.to_camera_sequence(world, cam))
    return data.window_arrays(x, y, N) + (sk,)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
