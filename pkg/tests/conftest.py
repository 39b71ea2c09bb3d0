import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from nsa_uda.geometry import ImageSample, boxes_from_arrays  # noqa: E402
from nsa_uda.synthetic import SyntheticSceneSpec, render_scene  # noqa: E402


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_scene(seed=0, canvas=64, objects=(1, 3)):
    spec = SyntheticSceneSpec(canvas_size=canvas, objects_min=objects[0], objects_max=objects[1])
    img, boxes = render_scene(np.random.default_rng(seed), spec)
    labels = boxes_from_arrays([b[:4] for b in boxes], [b[4] for b in boxes])
    return ImageSample(pixels=img, labels=labels, image_id=f"scene-{seed}")


@pytest.fixture
def scene():
    return make_scene(0)


ACCEPTANCE_LINES = {}


@pytest.fixture
def acceptance():
    """``record(n, ok, detail)`` stores the one-line verdict of criterion ``n``."""

    def record(n, ok, detail):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
