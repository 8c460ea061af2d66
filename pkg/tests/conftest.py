import numpy as np
import pytest
import torch

from src.datasets import Image, LabeledImageSet, make_synthetic_dataset
from src.encoders import ConvEncoder

SMALL_CHANNELS = (8, 16)


@pytest.fixture(autouse=True)
def single_thread(monkeypatch):
    monkeypatch.setenv('CONTRAST_NUM_THREADS', '1')
    torch.set_num_threads(1)


@pytest.fixture
def output_root(tmp_path, monkeypatch):
    root = tmp_path / 'runs'
    monkeypatch.setenv('CONTRAST_OUTPUT_ROOT', str(root))
    return root


@pytest.fixture
def small_dataset() -> LabeledImageSet:
    return make_synthetic_dataset(n_classes=4, per_class=8, size=16, seed=0)


@pytest.fixture
def unique_label_dataset() -> LabeledImageSet:
    """Every image is its own class."""
    return make_synthetic_dataset(n_classes=32, per_class=1, size=16, seed=3)


@pytest.fixture
def small_encoder() -> ConvEncoder:
    torch.manual_seed(0)
    return ConvEncoder(in_channels=3, channels=SMALL_CHANNELS, embedding_dim=16)


def random_image(rng: np.random.Generator, size: int = 16, channels: int = 3, source: str = '') -> Image:
    return Image(pixels=rng.uniform(0.0, 1.0, size=(size, size, channels)).astype(np.float32), source=source)
