import numpy as np
import pytest

from src.config import GeneratorConfig, ModelHyper, TrainConfig
from src.synthdata import generate


@pytest.fixture
def tiny_hyper() -> ModelHyper:
    """A network small enough for finite differences."""
    return ModelHyper(k=3, j=2, hidden=5, head_hidden=3, layers=1, d_x=4, d_y=3)


@pytest.fixture
def small_generator() -> GeneratorConfig:
    """A 200-pair synthetic world matching ``tiny_hyper``'s feature dimensions."""
    return GeneratorConfig(seed=3, n=200, d_x=4, d_y=3, k=3, j_true=3, temperature=0.1)


@pytest.fixture
def small_dataset(small_generator):
    """Train/eval splits of the small synthetic world."""
    return generate(small_generator)


@pytest.fixture
def quick_train() -> TrainConfig:
    """A short, silent, wall-clock-free training recipe."""
    return TrainConfig(
        seed=1,
        epochs=2,
        batch_size=16,
        learning_rate=1e-2,
        eval_interval=5,
        progress=False,
        record_wall_clock=False,
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
