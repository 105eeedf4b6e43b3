import numpy as np
import pytest
import torch

from spotnet.videogen import SceneConfig, gen_sequence


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def fixed_seq():
    return gen_sequence(SceneConfig(seed=0))


@pytest.fixture(scope="session")
def pan_seq():
    return gen_sequence(SceneConfig(seed=0, camera_pan=(2, 1)))


def mask_iou(a, b):
    union = (a | b).sum()
    return 1.0 if union == 0 else float((a & b).sum() / union)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
