import numpy as np
import pytest
import torch

from headdiff.synthdata import GeneratorConfig, generate_clip

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_clip():
    return generate_clip(GeneratorConfig(n_frames=30, image_size=32, seed=7))


@pytest.fixture(scope="session")
def small_clips():
    return [generate_clip(GeneratorConfig(n_frames=30, image_size=32, seed=s)) for s in (3, 4)]


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
