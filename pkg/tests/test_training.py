import math

import numpy as np
import pandas as pd
import pytest
import torch
from torch.utils.data import default_collate

from zxvad.errors import ConfigError, ContractError
from zxvad.ingest import DatasetManifest
from zxvad.training import (
    LOG_FILE,
    RESOLVED_CONFIG,
    IterationBatchSampler,
    LossReport,
    build_samples,
    build_state,
    checkpoint_path,
    load_checkpoint,
    parameter_digest,
    read_checkpoint,
    save_checkpoint,
    select_ti_subset,
    train,
    train_step,
)


def _batch(cfg, iteration=0):
    samples = build_samples(cfg)
    sampler = IterationBatchSampler(len(samples), samples.donors, cfg.batch_size, cfg.seed, 0, 1)
    return default_collate([samples[key] for key in sampler.batch_for(iteration)])


def _groups(state):
    return {
        "generator": parameter_digest(list(state.generator.parameters())),
        "discriminator": parameter_digest(list(state.discriminator.parameters())),
        "classifier": parameter_digest(list(state.classifier.parameters()) + [state.centers]),
        "extractor": state.extractor.parameter_digest(),
    }


def _assert_same_tensors(first, second):
    assert first.keys() == second.keys()
    for key in first:
        assert torch.equal(first[key], second[key]), key


class TestSampling:
    def test_batch_depends_only_on_seed_and_iteration(self, tiny_config):
        samples = build_samples(tiny_config)
        a = IterationBatchSampler(len(samples), samples.donors, 2, seed=0, start=0, stop=5)
        b = IterationBatchSampler(len(samples), samples.donors, 2, seed=0, start=3, stop=5)
        assert list(a)[3:] == list(b)
        assert len(b) == 2

    def test_keys_address_existing_frames(self, tiny_config):
        samples = build_samples(tiny_config)
        sampler = IterationBatchSampler(len(samples), samples.donors, 6, seed=1, start=0, stop=10)
        for keys in sampler:
            for key in keys:
                assert 0 <= key.window < len(samples)
                assert 0 <= key.donor_frame < samples.donors.videos[key.donor_video].frame_count

    def test_sample_items(self, tiny_config):
        samples = build_samples(tiny_config)
        batch = _batch(tiny_config)
        assert batch["inputs"].shape == (2, 4, 3, 32, 32)
        assert batch["target"].shape == (2, 3, 32, 32)
        assert batch["donor"].shape == (2, 3, 32, 32)
        assert len(samples) == 2 * (12 - 4)

    def test_ti_subset_is_seeded(self, toy_corpus):
        manifest = DatasetManifest.load(toy_corpus.ti)
        half = select_ti_subset(manifest, 0.5, seed=4)
        assert len(half.videos) == 1
        assert select_ti_subset(manifest, 0.5, seed=4) == half
        assert select_ti_subset(manifest, 1.0, seed=4) is manifest

    def test_no_clip_fits(self, tiny_config):
        with pytest.raises(ConfigError):
            build_samples(tiny_config.model_copy(update={"T": 12}))

    def test_missing_manifest(self, tiny_config, temp_dir):
        with pytest.raises(ConfigError):
            build_samples(tiny_config.model_copy(update={"train_manifest": temp_dir / "absent.json"}))
        with pytest.raises(ConfigError):
            build_samples(tiny_config.model_copy(update={"ti_manifest": None}))

    def test_generator_can_train_on_ti_frames(self, tiny_config):
        samples = build_samples(tiny_config.model_copy(update={"generator_source": "ti", "T": 2}))
        assert len(samples) == 2 * (6 - 2)


class TestTrainStep:
    def test_report_has_eleven_finite_scalars(self, tiny_config):
        state = build_state(tiny_config)
        report = train_step(_batch(tiny_config), state, tiny_config)
        values = report.model_dump()
        assert values.pop("iter") == 1
        assert len(values) == 11
        assert all(math.isfinite(value) for value in values.values())
        assert state.iteration == 1

    def test_zero_learning_rates_change_nothing(self, tiny_config):
        cfg = tiny_config.model_copy(update={"lr_G": 0.0, "lr_D": 0.0, "lr_N": 0.0})
        state = build_state(cfg)
        before = _groups(state)
        train_step(_batch(cfg), state, cfg)
        assert _groups(state) == before

    @pytest.mark.parametrize("group, lr_field", [
        ("discriminator", "lr_D"),
        ("classifier", "lr_N"),
        ("generator", "lr_G"),
    ])
    def test_each_update_touches_only_its_group(self, tiny_config, group, lr_field):
        update = {"lr_G": 0.0, "lr_D": 0.0, "lr_N": 0.0, lr_field: 0.01}
        cfg = tiny_config.model_copy(update=update)
        state = build_state(cfg)
        before = _groups(state)
        train_step(_batch(cfg), state, cfg)
        after = _groups(state)
        changed = {name for name in before if before[name] != after[name]}
        assert changed == {group}

    def test_same_seed_same_step(self, tiny_config):
        batch = _batch(tiny_config)
        first_state, second_state = build_state(tiny_config), build_state(tiny_config)
        first = train_step(batch, first_state, tiny_config)
        second = train_step(batch, second_state, tiny_config)
        assert first == second
        assert _groups(first_state) == _groups(second_state)

    def test_critics_are_trainable_after_the_step(self, tiny_config):
        state = build_state(tiny_config)
        train_step(_batch(tiny_config), state, tiny_config)
        assert all(p.requires_grad for p in state.discriminator.parameters())
        assert all(p.requires_grad for p in state.classifier.parameters())

    def test_without_adversary_or_memory(self, tiny_config):
        cfg = tiny_config.model_copy(update={"use_adversarial": False, "use_memory": False})
        state = build_state(cfg)
        report = train_step(_batch(cfg), state, cfg)
        assert report.L_D == 0.0
        assert report.L_MEM == 0.0

    def test_mismatched_batch(self, tiny_config):
        batch = _batch(tiny_config)
        batch["donor"] = batch["donor"][:1]
        with pytest.raises(ContractError):
            train_step(batch, build_state(tiny_config), tiny_config)

    def test_class_centers_cover_the_attention_map(self, tiny_config):
        state = build_state(tiny_config)
        assert state.centers.shape == (2, 7 * 7)
        assert torch.allclose(state.centers.norm(dim=1), torch.ones(2))


class TestCheckpoint:
    def test_round_trip(self, tiny_config, temp_dir):
        state = build_state(tiny_config)
        train_step(_batch(tiny_config), state, tiny_config)
        path = save_checkpoint(state, tiny_config, temp_dir / "ckpt.pt")
        restored, cfg = load_checkpoint(path)
        assert restored.iteration == 1
        assert cfg.model_dump(exclude={"output_dir", "resume_from"}) == \
            tiny_config.model_dump(exclude={"output_dir", "resume_from"})
        _assert_same_tensors(restored.generator.state_dict(), state.generator.state_dict())
        _assert_same_tensors(restored.classifier.state_dict(), state.classifier.state_dict())
        assert torch.equal(restored.centers, state.centers)

    def test_stored_config_ignores_the_output_directory(self, tiny_config, temp_dir):
        state = build_state(tiny_config)
        elsewhere = tiny_config.model_copy(update={"output_dir": temp_dir / "elsewhere"})
        first = read_checkpoint(save_checkpoint(state, tiny_config, temp_dir / "a.pt"))
        second = read_checkpoint(save_checkpoint(state, elsewhere, temp_dir / "b.pt"))
        assert first["config_hash"] == second["config_hash"]
        assert first["config"] == second["config"]

    def test_missing_checkpoint(self, temp_dir):
        with pytest.raises(ConfigError):
            read_checkpoint(temp_dir / "absent.pt")


@pytest.mark.integration
class TestTrain:
    def test_single_iteration_run(self, tiny_config):
        cfg = tiny_config.model_copy(update={"iterations": 1, "checkpoint_every": 500})
        last = train(cfg)
        assert last == checkpoint_path(cfg.output_dir, 1)
        assert sorted(p.name for p in (cfg.output_dir / "checkpoints").iterdir()) == ["ckpt_000001.pt"]
        log = pd.read_csv(cfg.output_dir / LOG_FILE)
        assert list(log.columns) == list(LossReport.model_fields)
        assert len(log) == 1
        assert (cfg.output_dir / RESOLVED_CONFIG).is_file()

    def test_checkpoint_cadence(self, tiny_config):
        train(tiny_config)
        names = sorted(p.name for p in (tiny_config.output_dir / "checkpoints").iterdir())
        assert names == ["ckpt_000001.pt", "ckpt_000002.pt"]

    @pytest.mark.slow
    def test_resume_matches_uninterrupted_run(self, tiny_config, temp_dir):
        full = train(tiny_config.model_copy(update={"output_dir": temp_dir / "full"}))

        first_half = tiny_config.model_copy(update={"output_dir": temp_dir / "split", "iterations": 1})
        middle = train(first_half)
        resumed = train(first_half.model_copy(update={"iterations": 2, "resume_from": middle}))

        expected, actual = read_checkpoint(full), read_checkpoint(resumed)
        for part in ("generator", "discriminator", "classifier"):
            _assert_same_tensors(expected[part], actual[part])
        assert torch.equal(expected["centers"], actual["centers"])
        assert expected["iteration"] == actual["iteration"] == 2
        full_log = pd.read_csv(temp_dir / "full" / LOG_FILE)
        split_log = pd.read_csv(temp_dir / "split" / LOG_FILE)
        pd.testing.assert_frame_equal(full_log, split_log)

    @pytest.mark.slow
    def test_two_runs_with_one_seed_agree(self, tiny_config, temp_dir):
        first = read_checkpoint(train(tiny_config.model_copy(update={"output_dir": temp_dir / "a"})))
        second = read_checkpoint(train(tiny_config.model_copy(update={"output_dir": temp_dir / "b"})))
        for part in ("generator", "discriminator", "classifier"):
            _assert_same_tensors(first[part], second[part])

    def test_empty_dataset_fails_before_any_step(self, tiny_config):
        with pytest.raises(ConfigError):
            train(tiny_config.model_copy(update={"T": 12}))
        assert not (tiny_config.output_dir / "checkpoints").exists()


def test_step_rng_is_reproducible(tiny_config):
    batch = _batch(tiny_config)
    state_a, state_b = build_state(tiny_config), build_state(tiny_config)
    report_a = train_step(batch, state_a, tiny_config, rng=np.random.default_rng(9))
    report_b = train_step(batch, state_b, tiny_config, rng=np.random.default_rng(9))
    assert report_a == report_b


@pytest.mark.slow
def test_extractor_is_untouched_by_a_hundred_steps(tiny_config):
    batch = _batch(tiny_config)
    state = build_state(tiny_config)
    before = state.extractor.parameter_digest()
    for i in range(100):
        train_step(batch, state, tiny_config, rng=np.random.default_rng([tiny_config.seed, i]))
    assert state.extractor.parameter_digest() == before
    assert build_state(tiny_config).extractor.parameter_digest() == before
