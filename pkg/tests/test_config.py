import math
from pathlib import Path

import pytest

from zxvad.config import (
    OUTPUT_ROOT_ENV,
    Command,
    RunConfig,
    TrainConfig,
    config_hash,
    dump_config,
    load_flat_document,
    output_root,
    validate_config,
)
from zxvad.errors import ConfigError


class TestValidateConfig:
    def test_absent_file_gives_reference_defaults(self):
        cfg = validate_config()
        assert cfg.lr_G == 0.0002
        assert cfg.lr_D == 0.00002
        assert cfg.lr_N == 0.00002
        assert cfg.batch_size == 8
        assert cfg.iterations == 5000
        assert cfg.T == 4
        assert cfg.image_size == 256
        assert cfg.checkpoint_every == 500

    def test_empty_file_gives_defaults(self, temp_dir):
        path = temp_dir / "empty.cfg"
        path.write_text("", encoding="utf-8")
        assert validate_config(path) == TrainConfig()

    def test_loss_weight_defaults(self):
        weights = validate_config().loss_weights
        assert weights.alpha_MEM == 0.0025
        assert weights.alpha_D == 0.05
        assert weights.alpha_N == 0.5
        assert weights.alpha_n == 1.0
        assert weights.alpha_rn == 0.01
        assert weights.alpha_aa == 1.0
        assert weights.alpha_raa == 1.0
        assert weights.arcface_scale == 64.0
        assert weights.arcface_margin == pytest.approx(0.49916, abs=1e-5)

    def test_negative_batch_size_is_a_range_error(self, temp_dir):
        path = temp_dir / "bad.cfg"
        path.write_text("batch_size = -1\n", encoding="utf-8")
        with pytest.raises(ConfigError) as info:
            validate_config(path)
        assert any(message.startswith("batch_size") for message in info.value.errors)

    def test_all_errors_are_collected(self, temp_dir):
        path = temp_dir / "bad.cfg"
        path.write_text("batch_size = -1\nlr_G = fast\nno_such_key = 1\n", encoding="utf-8")
        with pytest.raises(ConfigError) as info:
            validate_config(path)
        joined = "\n".join(info.value.errors)
        assert "batch_size" in joined
        assert "lr_G" in joined
        assert "no_such_key" in joined
        assert len(info.value.errors) == 3

    def test_missing_file_is_a_config_error(self, temp_dir):
        with pytest.raises(ConfigError, match="not found"):
            validate_config(temp_dir / "missing.cfg")

    def test_override_is_echoed_in_dump(self, temp_dir):
        path = temp_dir / "run.cfg"
        path.write_text("lr_G = 0.001\n", encoding="utf-8")
        cfg = validate_config(path)
        assert cfg.lr_G == 0.001
        dump = dump_config(cfg, temp_dir / "resolved.cfg")
        assert "lr_G = 0.001" in dump.read_text(encoding="utf-8").splitlines()

    def test_dump_feeds_back_to_the_same_config(self, temp_dir):
        cfg = TrainConfig(seed=7, gen_widths=(8, 16), use_memory=False, train_manifest=Path("a/b.json"))
        dump = dump_config(cfg, temp_dir / "resolved.cfg")
        again = validate_config(dump)
        assert again == cfg
        assert config_hash(again) == config_hash(cfg)

    def test_overrides_win_over_file(self, temp_dir):
        path = temp_dir / "run.cfg"
        path.write_text("seed = 1\n", encoding="utf-8")
        cfg = validate_config(path, RunConfig(command=Command.TRAIN, seed=9, deterministic=True).overrides())
        assert cfg.seed == 9
        assert cfg.deterministic is True


class TestTrainConfig:
    def test_widths_accept_comma_separated_text(self):
        cfg = TrainConfig.model_validate({"gen_widths": "16, 32,64"})
        assert cfg.gen_widths == (16, 32, 64)

    def test_zero_width_is_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(gen_widths=(16, 0))

    def test_adversarial_switch_zeroes_alpha_d(self):
        assert TrainConfig(use_adversarial=False).loss_weights.alpha_D == 0.0

    def test_extractor_seed_defaults_to_run_seed(self):
        assert TrainConfig(seed=5).synthesis_config.extractor_seed == 5
        assert TrainConfig(seed=5, extractor_seed=11).synthesis_config.extractor_seed == 11

    def test_margin_is_in_radians(self):
        assert TrainConfig().arcface_margin == pytest.approx(math.radians(28.6))


class TestFlatDocument:
    def test_comments_and_empty_values_are_dropped(self, temp_dir):
        path = temp_dir / "doc.cfg"
        path.write_text("# comment\nseed = 3\nresume_from =\n", encoding="utf-8")
        assert load_flat_document(path) == {"seed": "3"}


class TestOutputRoot:
    def test_relative_paths_are_rerooted(self, monkeypatch, temp_dir):
        monkeypatch.setenv(OUTPUT_ROOT_ENV, str(temp_dir))
        assert output_root("runs/x") == temp_dir / "runs/x"

    def test_absolute_paths_are_kept(self, monkeypatch, temp_dir):
        monkeypatch.setenv(OUTPUT_ROOT_ENV, "/elsewhere")
        assert output_root(temp_dir) == temp_dir

    def test_without_env_nothing_changes(self, monkeypatch):
        monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
        assert output_root("runs/x") == Path("runs/x")
