import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from zxvad.augment import augment, augment_batch, augment_pixels, identity_config
from zxvad.config import AugmentConfig
from zxvad.ingest import Frame


@pytest.fixture
def frame():
    return Frame(pixels=torch.rand(3, 24, 24) * 2 - 1, source_id="clip", index=4)


class TestAugment:
    def test_zero_parameters_are_the_identity(self, frame):
        result = augment(frame, identity_config(), np.random.default_rng(0))
        assert torch.equal(result.pixels, frame.pixels)
        assert result.source_id == "clip" and result.index == 4

    def test_probability_zero_is_the_identity(self, frame):
        cfg = AugmentConfig(p=0.0)
        assert torch.equal(augment_pixels(frame.pixels, cfg, np.random.default_rng(1)), frame.pixels)

    def test_default_augmentation_changes_the_frame(self, frame):
        result = augment(frame, AugmentConfig(), np.random.default_rng(2))
        assert not torch.equal(result.pixels, frame.pixels)

    def test_same_seed_is_bit_identical(self, frame):
        first = augment(frame, AugmentConfig(), np.random.default_rng(7))
        second = augment(frame, AugmentConfig(), np.random.default_rng(7))
        assert torch.equal(first.pixels, second.pixels)

    def test_rng_consumption_does_not_depend_on_p(self, frame):
        rng_on, rng_off = np.random.default_rng(3), np.random.default_rng(3)
        augment_pixels(frame.pixels, AugmentConfig(p=1.0), rng_on)
        augment_pixels(frame.pixels, AugmentConfig(p=0.0), rng_off)
        assert rng_on.random() == rng_off.random()

    def test_rotated_in_corners_are_black(self):
        white = torch.ones(3, 32, 32)
        cfg = AugmentConfig(brightness=0.0, contrast=0.0, saturation=0.0, hue=0.0, degrees=45.0,
                            distortion_scale=0.0)
        corners = [augment_pixels(white, cfg, np.random.default_rng(seed))[:, 0, 0] for seed in range(20)]
        assert any(bool((corner < -0.9).all()) for corner in corners)
        assert all(bool((corner >= -1).all()) for corner in corners)

    def test_batch_augments_frames_independently(self):
        frames = torch.rand(1, 3, 16, 16).expand(3, -1, -1, -1).clone() * 2 - 1
        result = augment_batch(frames, AugmentConfig(), np.random.default_rng(5))
        assert result.shape == frames.shape
        assert not torch.equal(result[0], result[1])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_shape_and_range_are_preserved(self, seed):
        pixels = torch.rand(3, 16, 16) * 2 - 1
        result = augment_pixels(pixels, AugmentConfig(), np.random.default_rng(seed))
        assert result.shape == pixels.shape
        assert result.dtype == pixels.dtype
        assert result.min() >= -1 and result.max() <= 1
