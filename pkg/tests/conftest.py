import numpy as np
import pytest
from hypothesis import settings

from tricond.model import ModelConfig, ModelParams, prepare_batch
from tricond.synthdata import GenerationSpec, generate_dataset
from tricond.training import tiny_config

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture(scope="session")
def tiny():
    """Tiny float64 model and a two-poster batch on a 20x20 canvas."""
    cfg = tiny_config()
    spec = GenerationSpec(height=20, width=20, scales=(1,))
    samples = generate_dataset(2, 3, spec)
    params = ModelParams.init(cfg, np.float64)
    return cfg, params, prepare_batch(samples, cfg, np.float64), samples


@pytest.fixture(scope="session")
def default_model():
    cfg = ModelConfig()
    samples = generate_dataset(3, 50)
    return cfg, ModelParams.init(cfg), prepare_batch(samples, cfg), samples
