"""Run-configuration parsing, validation, and round-tripping."""
import numpy as np
import pytest

from woundseg import AugmentConfig, ConfigError, RunConfig, reduced_config
from woundseg.config import (load_run_config, override_run_config,
                             parse_kv_text, run_config_from_kv,
                             run_config_to_kv, save_run_config)


def test_defaults_round_trip():
    cfg = RunConfig()
    assert run_config_from_kv(run_config_to_kv(cfg)) == cfg


def test_custom_round_trip():
    cfg = RunConfig(lr=0.0042, batch_size=3, epochs=7, lambda_bce=0.5,
                    lambda_dice=2.0, threshold=0.4, patch_size=32, seed=11,
                    augment=AugmentConfig(rrc_p=0.7, blur_kernel=5),
                    model=reduced_config(widths=(8, 16, 32)))
    assert run_config_from_kv(run_config_to_kv(cfg)) == cfg


def test_file_round_trip(tmp_path):
    cfg = RunConfig(lr=0.01, epochs=2, patch_size=32,
                    model=reduced_config(widths=(8, 16, 32)))
    save_run_config(tmp_path / "c.cfg", cfg)
    assert load_run_config(tmp_path / "c.cfg") == cfg


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="mystery"):
        run_config_from_kv({"mystery": "1"})
    with pytest.raises(ConfigError, match="aug_mystery"):
        run_config_from_kv({"aug_mystery": "1"})
    with pytest.raises(ConfigError, match="mystery"):
        run_config_from_kv({"model.mystery": "1"})


def test_bad_values_reported():
    with pytest.raises(ConfigError, match="lr"):
        run_config_from_kv({"lr": "fast"})
    with pytest.raises(ConfigError, match="epochs"):
        run_config_from_kv({"epochs": "ten"})


def test_kv_text_parsing():
    kv = parse_kv_text("# comment\n\nlr=0.5\n  epochs = 3  \n")
    assert kv == {"lr": "0.5", "epochs": "3"}
    with pytest.raises(ConfigError, match="key=value"):
        parse_kv_text("just words")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_kv_text("lr=1\nlr=2")


def test_validation_rules():
    with pytest.raises(ConfigError, match="lr"):
        RunConfig(lr=0.0)
    with pytest.raises(ConfigError, match="batch_size"):
        RunConfig(batch_size=0)
    with pytest.raises(ConfigError, match="epochs"):
        RunConfig(epochs=-1)
    with pytest.raises(ConfigError, match="threshold"):
        RunConfig(threshold=1.0)
    with pytest.raises(ConfigError, match="divisible"):
        RunConfig(patch_size=30, model=reduced_config(widths=(8, 16, 32)))
    with pytest.raises(ConfigError, match="weights"):
        RunConfig(lambda_bce=-0.1)


def test_overrides_apply_only_non_none():
    cfg = RunConfig(lr=0.001, epochs=5, patch_size=224)
    out = override_run_config(cfg, lr=0.01, epochs=None)
    assert out.lr == 0.01 and out.epochs == 5
    assert override_run_config(cfg) == cfg


def test_model_prefix_reaches_model_config():
    cfg = run_config_from_kv({
        "patch_size": "32",
        "model.encoder_widths": "8,16,32",
        "model.blocks_per_stage": "1,1,1",
        "model.decoder_widths": "16,8",
        "model.decoder_blocks": "1,1",
    })
    assert cfg.model.encoder_widths == (8, 16, 32)
    assert cfg.patch_size == 32


def test_missing_config_file():
    with pytest.raises(ConfigError, match="not found"):
        load_run_config("/nonexistent.cfg")


def test_resolved_config_is_reloadable(tmp_path):
    np.random.default_rng(0)
    cfg = RunConfig(patch_size=32, model=reduced_config(widths=(8, 16, 32)))
    save_run_config(tmp_path / "resolved.cfg", cfg)
    text = (tmp_path / "resolved.cfg").read_text()
    assert "model.encoder_widths=8,16,32" in text
    assert "aug_rrc_p=" in text
    assert load_run_config(tmp_path / "resolved.cfg") == cfg
