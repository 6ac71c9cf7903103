import shutil
import tempfile
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from zxvad.config import TrainConfig
from zxvad.toybench import ToySpec, generate_toy_dataset


# Pytest configuration
def pytest_configure(config):
    """Configure pytest with custom markers"""
    config.addinivalue_line(
        "markers", "integration: marks tests as integration tests (may be slow)"
    )
    config.addinivalue_line(
        "markers", "unit: marks tests as unit tests (fast)"
    )


# Essential fixtures
@pytest.fixture
def temp_dir():
    """Create a temporary directory for test files"""
    temp_path = tempfile.mkdtemp()
    yield Path(temp_path)
    # Cleanup after test
    shutil.rmtree(temp_path)


@pytest.fixture
def write_frames():
    """Write numbered PNG frames for one video: write_frames(directory, count, size)"""
    def _write(directory: Path, count: int, size: int = 16, value: int = 128) -> Path:
        directory.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            pixels = np.full((size, size, 3), (value + i) % 256, dtype=np.uint8)
            Image.fromarray(pixels).save(directory / f"{i:06d}.png")
        return directory
    return _write


SMALL_TOY = ToySpec(
    resolution=32,
    video_length=12,
    train_videos=2,
    test_videos=2,
    ti_videos=2,
    ti_length=6,
    anomaly_start=6,
    anomaly_end=9,
    seed=3,
)


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    """A tiny generated corpus shared by the integration tests"""
    return generate_toy_dataset(SMALL_TOY, tmp_path_factory.mktemp("toy"))


@pytest.fixture
def tiny_config(toy_corpus, temp_dir):
    """Smallest configuration that still exercises every network and loss"""
    return TrainConfig(
        seed=0,
        deterministic=True,
        device="cpu",
        output_dir=temp_dir / "run",
        iterations=2,
        batch_size=2,
        T=4,
        image_size=32,
        checkpoint_every=1,
        gen_widths=(8, 16),
        critic_widths=(8, 16, 16),
        memory_items=10,
        extractor_arch="resnet18",
        extractor_input_size=64,
        train_manifest=toy_corpus.train,
        ti_manifest=toy_corpus.ti,
        donor_source="ti",
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
