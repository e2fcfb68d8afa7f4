import numpy as np
import pytest

from apn.cli import bundle_digest, main
from apn.data import load_bundle
from apn.evaluation import EvalReport

GEN = ["--n-classes", "6", "--n-unseen", "2", "--k-attrs", "6", "--l-groups", "2", "--image-size", "16",
       "--imgs-per-class", "6"]
TRAIN = ["--epochs", "1", "--f64", "--threads", "1"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-synth", "--out", str(root / "data"), "--seed", "3"] + GEN) == 0
    cfg = root / "train.cfg"
    cfg.write_text("channels = 4,8\nbatch_size = 8\n")
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "run"), "--config", str(cfg),
                 "--seed", "1"] + TRAIN) == 0
    return root


def test_gen_synth_deterministic(tmp_path):
    assert main(["gen-synth", "--out", str(tmp_path / "a"), "--seed", "3"] + GEN) == 0
    assert main(["gen-synth", "--out", str(tmp_path / "b"), "--seed", "3"] + GEN) == 0
    assert bundle_digest(tmp_path / "a") == bundle_digest(tmp_path / "b")
    assert (tmp_path / "a" / "manifest.txt").exists()
    assert load_bundle(tmp_path / "a") == load_bundle(tmp_path / "b")


def test_train_outputs(workspace):
    run = workspace / "run"
    assert (run / "model.apnckpt").exists()
    assert (run / "train_log.tsv").read_text().startswith("epoch\t")
    manifest = (run / "manifest.txt").read_text()
    assert "apn_version" in manifest and "seed = 1" in manifest and "channels = 4,8" in manifest


def test_train_deterministic(workspace, tmp_path):
    cfg = workspace / "train.cfg"
    assert main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path / "again"), "--config",
                 str(cfg), "--seed", "1"] + TRAIN) == 0
    assert (tmp_path / "again" / "model.apnckpt").read_bytes() == (workspace / "run" / "model.apnckpt").read_bytes()


@pytest.mark.parametrize("mode", ["zsl", "gzsl", "fsl", "gfsl"])
def test_eval_modes(workspace, tmp_path, mode, capsys):
    args = ["eval", "--data", str(workspace / "data"), "--checkpoint", str(workspace / "run" / "model.apnckpt"),
            "--out", str(tmp_path), "--mode", mode, "--way", "2", "--episodes", "10", "--query", "3"]
    assert main(args) == 0
    rep = EvalReport.from_text((tmp_path / "report.tsv").read_text())
    assert rep.mode == mode
    assert 0 <= rep.t1 <= 1
    assert (tmp_path / "manifest.txt").exists()


def test_eval_negative_gamma_is_usage_error(workspace, tmp_path, capsys):
    code = main(["eval", "--data", str(workspace / "data"), "--checkpoint", str(workspace / "run" / "model.apnckpt"),
                 "--out", str(tmp_path), "--mode", "gzsl", "--gamma", "-1"])
    assert code == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("apn: error[usage]:")


def test_unknown_flag_is_usage_error(capsys):
    assert main(["train", "--bogus"]) == 1
    assert capsys.readouterr().err.count("\n") == 1


def test_missing_subcommand(capsys):
    assert main([]) == 1
    assert "error[usage]" in capsys.readouterr().err


def test_bad_data_dir_is_data_error(tmp_path, capsys):
    code = main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")])
    assert code == 2
    assert capsys.readouterr().err.startswith("apn: error[data]:")


def test_corrupt_bundle_is_data_error(workspace, tmp_path, capsys):
    import shutil
    shutil.copytree(workspace / "data", tmp_path / "d")
    p = tmp_path / "d" / "tensors.bin"
    p.write_bytes(b"XXXXXXXX" + p.read_bytes()[8:])
    code = main(["pcp", "--data", str(tmp_path / "d"), "--checkpoint", str(workspace / "run" / "model.apnckpt"),
                 "--out", str(tmp_path / "o")])
    assert code == 2
    assert "bad magic" in capsys.readouterr().err


def test_pcp_command(workspace, tmp_path):
    assert main(["pcp", "--data", str(workspace / "data"), "--checkpoint", str(workspace / "run" / "model.apnckpt"),
                 "--out", str(tmp_path)]) == 0
    rep = EvalReport.from_text((tmp_path / "report.tsv").read_text())
    assert set(rep.pcp) == {"part1", "part2"}


def test_localize_command(workspace, tmp_path):
    assert main(["localize", "--data", str(workspace / "data"), "--checkpoint",
                 str(workspace / "run" / "model.apnckpt"), "--out", str(tmp_path), "--images", "0,3"]) == 0
    rows = (tmp_path / "localize.tsv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 2
    assert len(list(tmp_path.glob("*.pgm"))) == 4
    assert len(list(tmp_path.glob("*.ppm"))) == 4


def test_localize_bad_index(workspace, tmp_path):
    assert main(["localize", "--data", str(workspace / "data"), "--checkpoint",
                 str(workspace / "run" / "model.apnckpt"), "--out", str(tmp_path), "--images", "999"]) == 1


def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--trials", "2", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "joint_loss" in out and "FAIL" not in out
    assert (tmp_path / "gradcheck.txt").exists() and (tmp_path / "manifest.txt").exists()


def test_ablation_flags_map_to_toggles(workspace, tmp_path):
    assert main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path), "--config",
                 str(workspace / "train.cfg"), "--no-reg", "--no-ad", "--no-cpt", "--no-zoom"] + TRAIN) == 0
    text = (tmp_path / "manifest.txt").read_text()
    for flag in ("reg", "ad", "cpt", "zoom"):
        assert f"\n{flag} = false" in text
    assert "cpt_clamp = true" in text


def test_divergence_is_numerical_error(workspace, tmp_path, capsys):
    cfg = tmp_path / "hot.cfg"
    cfg.write_text("channels = 4,8\nbatch_size = 8\nlr = 1e300\n")
    code = main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path / "o"), "--config", str(cfg)]
                + TRAIN)
    assert code == 3
    assert capsys.readouterr().err.startswith("apn: error[numerical]:")
