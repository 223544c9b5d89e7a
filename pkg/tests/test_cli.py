"""Command-line interface: end-to-end runs, error categories, determinism."""
import numpy as np
import pytest

from woundseg import load_sample
from woundseg.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Synthetic corpus plus a short training run, shared by CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    out = root / "run"
    cfg = root / "desk.cfg"
    cfg.write_text(
        "lr=0.003\nbatch_size=4\nepochs=2\npatch_size=32\nseed=0\n"
        "model.encoder_widths=8,16,32\nmodel.blocks_per_stage=1,1,1\n"
        "model.decoder_widths=16,8\nmodel.decoder_blocks=1,1\n"
        "model.group_base=8\n")
    assert main(["synth", "--out", str(data), "--train", "4", "--val", "2",
                 "--size", "64", "--seed", "7"]) == 0
    assert main(["train", "--data", str(data), "--out", str(out),
                 "--config", str(cfg)]) == 0
    return {"root": root, "data": data, "out": out, "cfg": cfg,
            "ckpt": out / "best.rseg"}


def test_synth_layout(workspace):
    data = workspace["data"]
    assert len(list((data / "train" / "images").glob("*.png"))) == 4
    assert len(list((data / "validation" / "labels").glob("*.png"))) == 2


def test_train_artifacts(workspace):
    out = workspace["out"]
    for name in ("best.rseg", "last.rseg", "history.csv", "config_resolved.cfg"):
        assert (out / name).is_file(), name
    lines = (out / "history.csv").read_text().strip().splitlines()
    assert lines[0] == "epoch,seg_loss,dsc" and len(lines) == 3


def test_predict_writes_masks(workspace, capsys, tmp_path):
    code, out_text, _ = run(
        capsys, "predict", "--checkpoint", str(workspace["ckpt"]),
        "--image", str(workspace["data"] / "validation" / "images"),
        "--out", str(tmp_path / "pred"), "--patch-size", "32")
    assert code == 0
    masks = sorted((tmp_path / "pred").glob("*_mask.png"))
    assert len(masks) == 2
    s = load_sample(masks[0])
    assert set(np.unique(s.image).tolist()) <= {0.0, 1.0}
    assert "validation_0000_mask.png" in out_text


def test_predict_single_file_and_tta(workspace, capsys, tmp_path):
    img = next((workspace["data"] / "validation" / "images").glob("*.png"))
    code, _, _ = run(
        capsys, "predict", "--checkpoint", str(workspace["ckpt"]),
        "--image", str(img), "--out", str(tmp_path / "p2"),
        "--patch-size", "32", "--tta")
    assert code == 0
    assert len(list((tmp_path / "p2").glob("*_mask.png"))) == 1


def test_predict_is_deterministic(workspace, capsys, tmp_path):
    img = next((workspace["data"] / "validation" / "images").glob("*.png"))
    for sub in ("d1", "d2"):
        assert run(capsys, "predict", "--checkpoint", str(workspace["ckpt"]),
                   "--image", str(img), "--out", str(tmp_path / sub),
                   "--patch-size", "32")[0] == 0
    name = img.stem + "_mask.png"
    assert (tmp_path / "d1" / name).read_bytes() == \
        (tmp_path / "d2" / name).read_bytes()


def test_evaluate_report(workspace, capsys, tmp_path):
    report = tmp_path / "metrics.txt"
    code, out_text, _ = run(
        capsys, "evaluate", "--checkpoint", str(workspace["ckpt"]),
        "--data", str(workspace["data"]), "--patch-size", "32",
        "--per-image", "--out", str(report))
    assert code == 0
    assert "images=2" in out_text
    for key in ("micro_dsc=", "micro_jsi=", "micro_sensitivity=",
                "micro_specificity=", "micro_precision=", "macro_dsc=",
                "image=validation_0000"):
        assert key in out_text, key
    assert report.read_text().strip() in out_text


def test_info_table(workspace, capsys):
    code, out_text, _ = run(capsys, "info", "--config", str(workspace["cfg"]),
                            "--size", "64")
    assert code == 0
    assert "params=" in out_text and "gflops=" in out_text
    assert "enc0.b0.conv1" in out_text and "head" in out_text


def test_info_presets(capsys):
    code, out_text, _ = run(capsys, "info", "--preset", "vanilla")
    assert code == 0
    assert "params=31031745" in out_text
    code, out_text, _ = run(capsys, "info", "--preset", "default")
    assert code == 0
    assert "params=4902625" in out_text


def test_info_from_checkpoint(workspace, capsys):
    code, out_text, _ = run(capsys, "info", "--checkpoint",
                            str(workspace["ckpt"]), "--size", "32")
    assert code == 0
    assert "params=" in out_text


def test_init_config_round_trips(capsys, tmp_path):
    cfg = tmp_path / "default.cfg"
    assert run(capsys, "init-config", "--out", str(cfg))[0] == 0
    from woundseg.config import load_run_config
    from woundseg import RunConfig
    assert load_run_config(cfg) == RunConfig()


# --------------------------------------------------------------------------
# Error reporting: one machine-parseable line, exit code 1

def _expect_error(capsys, category, *argv):
    code, _, err = run(capsys, *argv)
    assert code == 1
    line = err.strip().splitlines()[-1]
    assert line.startswith(f"error: category={category} "), line


def test_error_missing_checkpoint(workspace, capsys, tmp_path):
    _expect_error(capsys, "checkpoint", "predict", "--checkpoint",
                  "/nope.rseg", "--image", str(workspace["data"]),
                  "--out", str(tmp_path))


def test_error_corrupt_checkpoint(capsys, tmp_path):
    bad = tmp_path / "bad.rseg"
    bad.write_bytes(b"garbage-bytes")
    _expect_error(capsys, "checkpoint", "info", "--checkpoint", str(bad))


def test_error_unknown_config_key(workspace, capsys, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("warp_drive=1\n")
    _expect_error(capsys, "config", "train", "--data", str(workspace["data"]),
                  "--out", str(tmp_path / "o"), "--config", str(cfg))


def test_error_missing_data_dir(workspace, capsys, tmp_path):
    _expect_error(capsys, "data", "evaluate", "--checkpoint",
                  str(workspace["ckpt"]), "--data", str(tmp_path / "missing"))


def test_error_indivisible_patch(workspace, capsys, tmp_path):
    _expect_error(capsys, "config", "predict", "--checkpoint",
                  str(workspace["ckpt"]),
                  "--image", str(workspace["data"] / "validation" / "images"),
                  "--out", str(tmp_path), "--patch-size", "30")


def test_error_bad_size_string(capsys):
    _expect_error(capsys, "config", "info", "--preset", "default",
                  "--size", "two-two-four")


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["definitely-not-a-command"])
    assert exc.value.code == 2


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "woundseg" in capsys.readouterr().out
