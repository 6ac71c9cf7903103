import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from zxvad.config import SynthesisConfig
from zxvad.errors import ContractError, NumericError
from zxvad.ingest import Frame
from zxvad.synthesis import (
    FrozenFeatureExtractor,
    binarize,
    paste_box_from_draws,
    paste_object,
    sample_paste_box,
    scda_attention,
    synthesize,
    synthesize_batch,
)


@pytest.fixture(scope="module")
def extractor():
    return FrozenFeatureExtractor(arch="resnet18", seed=0, input_size=64)


class TestScdaAttention:
    def test_all_zero_features(self):
        assert torch.equal(scda_attention(torch.zeros(4, 3, 3)), torch.zeros(3, 3))

    def test_channel_sum_then_min_max(self):
        features = torch.tensor([[[1.0, 0.0], [0.0, 0.0]], [[1.0, 2.0], [0.0, 0.0]]])
        assert torch.equal(scda_attention(features), torch.tensor([[1.0, 1.0], [0.0, 0.0]]))

    def test_single_channel_is_its_normalization(self):
        channel = torch.tensor([[2.0, 4.0], [6.0, 10.0]])
        expected = (channel - 2.0) / 8.0
        assert torch.allclose(scda_attention(channel[None]), expected)

    def test_batched_maps_are_normalized_independently(self):
        features = torch.stack([torch.arange(8.0).reshape(2, 2, 2), torch.ones(2, 2, 2)])
        attention = scda_attention(features)
        assert attention[0].max() == 1.0 and attention[0].min() == 0.0
        assert torch.equal(attention[1], torch.zeros(2, 2))

    def test_non_finite_features(self):
        features = torch.zeros(2, 2, 2)
        features[0, 0, 0] = float("nan")
        with pytest.raises(NumericError):
            scda_attention(features)

    def test_missing_channel_axis(self):
        with pytest.raises(ContractError):
            scda_attention(torch.zeros(4, 4))


class TestBinarize:
    def test_zero_attention(self):
        assert torch.equal(binarize(torch.zeros(2, 2), 0.1), torch.zeros(2, 2))

    def test_reference_map(self):
        mask = binarize(torch.tensor([[1.0, 1.0], [0.0, 0.0]]), 0.1)
        assert torch.equal(mask, torch.tensor([[1.0, 1.0], [0.0, 0.0]]))

    def test_threshold_at_max_keeps_nothing(self):
        attention = scda_attention(torch.rand(3, 5, 5))
        assert binarize(attention, 1.0).sum() == 0


class TestPasteBox:
    def test_zero_beta_centered_is_full_frame(self):
        box = paste_box_from_draws(256, 256, 128.0, 128.0, 0.0)
        assert (box.b1, box.b2, box.b3, box.b4) == (0, 256, 0, 256)

    def test_unit_beta_is_empty(self):
        assert paste_box_from_draws(256, 256, 100.0, 100.0, 1.0) is None

    def test_reference_draws(self):
        box = paste_box_from_draws(256, 256, 100.0, 100.0, 0.75)
        assert box.b_w == pytest.approx(128.0) and box.b_h == pytest.approx(128.0)
        assert (box.b1, box.b2, box.b3, box.b4) == (36, 164, 36, 164)
        assert box.width == 128 and box.height == 128

    def test_box_is_clipped_to_the_frame(self):
        box = paste_box_from_draws(64, 64, 2.0, 62.0, 0.0)
        assert (box.b1, box.b2, box.b3, box.b4) == (0, 34, 30, 64)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 300), st.integers(1, 300), st.integers(0, 2**32 - 1))
    def test_sampled_box_is_inside_and_non_empty(self, H, W, seed):
        box = sample_paste_box(H, W, np.random.default_rng(seed))
        assert 0 <= box.b1 < box.b2 <= W
        assert 0 <= box.b3 < box.b4 <= H

    def test_same_rng_state_same_box(self):
        assert sample_paste_box(64, 48, np.random.default_rng(5)) == sample_paste_box(64, 48, np.random.default_rng(5))

    def test_invalid_frame_size(self):
        with pytest.raises(ContractError):
            sample_paste_box(0, 10, np.random.default_rng(0))


class TestPasteObject:
    def test_empty_mask_leaves_base_untouched(self):
        base, donor = torch.rand(3, 32, 32), torch.rand(3, 32, 32)
        box = paste_box_from_draws(32, 32, 16.0, 16.0, 0.5)
        result = paste_object(base, donor, torch.zeros(32, 32), box)
        assert torch.equal(result.frame, base)
        assert result.mask.sum() == 0
        assert result.empty

    def test_full_mask_replaces_the_box(self):
        base, donor = torch.rand(3, 256, 256) * 2 - 1, torch.rand(3, 256, 256) * 2 - 1
        box = paste_box_from_draws(256, 256, 100.0, 100.0, 0.75)
        result = paste_object(base, donor, torch.ones(256, 256), box)
        crop = F.interpolate(donor[None], size=(128, 128), mode="bilinear", align_corners=False)[0]
        assert torch.allclose(result.frame[:, 36:164, 36:164], crop)
        outside = torch.ones(256, 256, dtype=torch.bool)
        outside[36:164, 36:164] = False
        assert torch.equal(result.frame[:, outside], base[:, outside])
        assert torch.equal(result.mask[36:164, 36:164], torch.ones(128, 128))
        assert result.mask.sum() == 128 * 128
        assert not result.empty

    def test_pixel_trace_with_nearest_mask(self):
        base, donor = -torch.ones(3, 4, 4), torch.ones(3, 4, 4)
        mask = torch.tensor([[1.0, 0.0], [0.0, 0.0]])
        box = paste_box_from_draws(4, 4, 1.0, 1.0, 0.75)
        assert (box.b1, box.b2, box.b3, box.b4) == (0, 2, 0, 2)
        result = paste_object(base, donor, mask, box)
        expected = -torch.ones(3, 4, 4)
        expected[:, 0, 0] = 1.0
        assert torch.equal(result.frame, expected)
        expected_mask = torch.zeros(4, 4)
        expected_mask[0, 0] = 1.0
        assert torch.equal(result.mask, expected_mask)

    def test_cutmix_ignores_the_object_mask(self):
        base, donor = -torch.ones(3, 8, 8), torch.ones(3, 8, 8)
        box = paste_box_from_draws(8, 8, 4.0, 4.0, 0.75)
        result = paste_object(base, donor, torch.zeros(8, 8), box, mixing="cutmix")
        assert torch.equal(result.frame[:, box.b3:box.b4, box.b1:box.b2], torch.ones(3, box.height, box.width))

    def test_mixup_needs_an_rng(self):
        box = paste_box_from_draws(8, 8, 4.0, 4.0, 0.75)
        with pytest.raises(ContractError):
            paste_object(torch.zeros(3, 8, 8), torch.ones(3, 8, 8), torch.ones(8, 8), box, mixing="mixup")

    def test_mismatched_shapes(self):
        box = paste_box_from_draws(8, 8, 4.0, 4.0, 0.75)
        with pytest.raises(ContractError):
            paste_object(torch.zeros(3, 8, 8), torch.zeros(3, 4, 4), torch.ones(8, 8), box)

    @pytest.mark.parametrize("mixing", ["paste", "cutmix", "mixup"])
    def test_base_survives_outside_the_mask(self, mixing):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            base = torch.from_numpy(rng.uniform(-1, 1, (3, 16, 16))).float()
            donor = torch.from_numpy(rng.uniform(-1, 1, (3, 16, 16))).float()
            mask = torch.from_numpy(rng.random((4, 4)) > 0.5).float()
            box = sample_paste_box(16, 16, rng)
            result = paste_object(base, donor, mask, box, mixing=mixing, rng=rng)
            outside = result.mask == 0
            assert torch.equal(result.frame[:, outside], base[:, outside])
            assert set(result.mask.unique().tolist()) <= {0.0, 1.0}
            in_box = torch.zeros(16, 16, dtype=torch.bool)
            in_box[box.b3:box.b4, box.b1:box.b2] = True
            assert result.mask[~in_box].sum() == 0


class TestFrozenFeatureExtractor:
    def test_same_seed_same_parameters(self, extractor):
        again = FrozenFeatureExtractor(arch="resnet18", seed=0, input_size=64)
        assert again.parameter_digest() == extractor.parameter_digest()

    def test_other_seed_other_parameters(self, extractor):
        other = FrozenFeatureExtractor(arch="resnet18", seed=1, input_size=64)
        assert other.parameter_digest() != extractor.parameter_digest()

    def test_parameters_are_frozen(self, extractor):
        assert not any(p.requires_grad for p in extractor.parameters())
        extractor.train()
        assert not extractor.training

    def test_construction_does_not_touch_global_rng(self):
        torch.manual_seed(42)
        expected = torch.rand(3)
        torch.manual_seed(42)
        FrozenFeatureExtractor(arch="resnet18", seed=3, input_size=64)
        assert torch.equal(torch.rand(3), expected)

    def test_feature_shape(self, extractor):
        features = extractor(torch.rand(2, 3, 32, 32) * 2 - 1)
        assert features.shape == (2, 512, 2, 2)

    def test_digest_survives_forward(self, extractor):
        before = extractor.parameter_digest()
        extractor(torch.rand(1, 3, 64, 64))
        assert extractor.parameter_digest() == before

    def test_from_config(self):
        cfg = SynthesisConfig(extractor_arch="resnet18", extractor_seed=7, extractor_input_size=64)
        built = FrozenFeatureExtractor.from_config(cfg)
        assert built.seed == 7 and built.input_size == 64

    def test_unknown_architecture(self):
        with pytest.raises(ValueError):
            FrozenFeatureExtractor(arch="no_such_network")


class TestSynthesize:
    def test_result_contract(self, extractor):
        base = Frame(pixels=torch.rand(3, 32, 32) * 2 - 1, source_id="base", index=3)
        donor = Frame(pixels=torch.rand(3, 32, 32) * 2 - 1, source_id="donor", index=9)
        result = synthesize(base, donor, extractor, 0.1, np.random.default_rng(0), seed=0)
        assert result.frame.shape == (3, 32, 32)
        assert result.mask.shape == (32, 32)
        assert set(result.mask.unique().tolist()) <= {0.0, 1.0}
        outside = result.mask == 0
        assert torch.equal(result.frame[:, outside], base.pixels[:, outside])
        assert result.provenance.base_id == "base" and result.provenance.donor_index == 9

    def test_batch_is_reproducible(self, extractor):
        bases = torch.rand(2, 3, 32, 32) * 2 - 1
        donors = torch.rand(2, 3, 32, 32) * 2 - 1
        cfg = SynthesisConfig(extractor_arch="resnet18", extractor_input_size=64)
        first = synthesize_batch(bases, donors, extractor, cfg, np.random.default_rng(11))
        second = synthesize_batch(bases, donors, extractor, cfg, np.random.default_rng(11))
        assert torch.equal(first[0], second[0])
        assert torch.equal(first[1], second[1])
        assert first[2] == second[2]
        assert first[0].shape == (2, 3, 32, 32) and first[1].shape == (2, 32, 32)
