import numpy as np
import pytest
from hypothesis import settings

from catprior.motion import MotionDataset, default_clips, procedural_generate
from catprior.sim import load_model

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def model():
    return load_model()


@pytest.fixture(scope="session")
def dataset(model):
    return MotionDataset(default_clips(duration=2.0), model)


@pytest.fixture(scope="session")
def two_skill_dataset(model):
    return MotionDataset([procedural_generate("idle", 2.0, 0, "idle_00"),
                          procedural_generate("punch", 2.0, 1, "punch_01")], model)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
