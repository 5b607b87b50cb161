import subprocess
import sys

import pytest

from amad.cli import parse_datasets, read_config, run_cli

TINY = ["--window-len", "10", "--d-model", "8", "--n-heads", "2", "--n-layers", "1", "--max-epochs", "1",
        "--train-stride", "20", "--batch-size", "8"]


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert run_cli(["synth", "--seed", "7", "--length", "300", "--dims", "2", "--out", str(d)]) == 0
    return d


def test_synth_twice_is_byte_identical(tmp_path, synth_dir):
    assert run_cli(["synth", "--seed", "7", "--length", "300", "--dims", "2", "--out", str(tmp_path)]) == 0
    for name in ("train.csv", "test.csv"):
        assert (tmp_path / name).read_bytes() == (synth_dir / name).read_bytes()
    assert (tmp_path / "manifest.txt").exists()


def test_synth_binary_format(tmp_path):
    assert run_cli(["synth", "--seed", "1", "--length", "200", "--dims", "2", "--format", "binary",
                    "--out", str(tmp_path)]) == 0
    assert (tmp_path / "test.amad").read_bytes()[:4] == b"AMAD"


def test_train_full_preset_records_full_size_defaults(tmp_path, synth_dir):
    code = run_cli(["train", "--preset", "full", "--seed", "1", "--train", str(synth_dir / "train.csv"),
                    "--out", str(tmp_path), "--window-len", "10", "--max-epochs", "1", "--train-stride", "20"])
    assert code == 0
    m = read_config(tmp_path / "manifest.txt")
    assert (m["lam"], m["n_layers"], m["n_heads"], m["d_model"]) == ("3.0", "3", "8", "512")


def test_pipeline_and_manifest_rerun(tmp_path, synth_dir):
    train, test = str(synth_dir / "train.csv"), str(synth_dir / "test.csv")
    m1, m2 = tmp_path / "m1", tmp_path / "m2"
    assert run_cli(["train", "--seed", "3", "--train", train, "--out", str(m1), *TINY]) == 0
    manifest = (m1 / "manifest.txt").read_text()
    assert "artifact.model.ckpt = " in manifest and "artifact.train_log.csv = " in manifest
    assert run_cli(["train", "--config", str(m1 / "manifest.txt"), "--out", str(m2)]) == 0
    assert (m1 / "model.ckpt").read_bytes() == (m2 / "model.ckpt").read_bytes()
    assert (m1 / "train_log.csv").read_bytes() == (m2 / "train_log.csv").read_bytes()

    s = tmp_path / "s"
    assert run_cli(["score", "--checkpoint", str(m1 / "model.ckpt"), "--series", test, "--train", train,
                    "--ar", "2", "--out", str(s)]) == 0
    rows = (s / "scores.csv").read_text().splitlines()
    assert rows[0] == "timestamp,score,flag_raw,flag_adjusted,gt" and len(rows) == 151

    e = tmp_path / "e"
    assert run_cli(["eval", "--scores", str(s / "scores.csv"), "--out", str(e)]) == 0
    lines = (e / "eval.csv").read_text().splitlines()
    assert lines[0] == "mode,P,R,F1,TP,FP,FN"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["raw", "adjusted"]


def test_eval_perfect_flags_gives_f1_one(tmp_path):
    scores = tmp_path / "scores.csv"
    scores.write_text("timestamp,score,flag_raw,flag_adjusted,gt\n0,0.1,0,0,0\n1,0.9,1,1,1\n2,0.8,1,1,1\n")
    assert run_cli(["eval", "--scores", str(scores), "--out", str(tmp_path)]) == 0
    for line in (tmp_path / "eval.csv").read_text().splitlines()[1:]:
        assert line.split(",")[3] == "1.0000"


def test_grid_and_ablate_write_tables(tmp_path, synth_dir):
    train, test = str(synth_dir / "train.csv"), str(synth_dir / "test.csv")
    common = ["--seed", "2", *TINY, "--population", "test", "--ar", "5"]
    assert run_cli(["grid", "--train", train, "--test", test, "--alphas", "0.3,0.9", "--taus", "0.07",
                    "--out", str(tmp_path / "g"), *common]) == 0
    assert len((tmp_path / "g" / "grid.csv").read_text().splitlines()) == 1 + 2 + 2 + 1
    assert run_cli(["ablate", "--dataset", f"synth={train},{test}", "--out", str(tmp_path / "a"), *common]) == 0
    lines = (tmp_path / "a" / "ablation.csv").read_text().splitlines()
    assert len(lines) == 7 and lines[0].endswith("synth F1,Avg F1")


def test_config_file_with_flag_override(tmp_path, synth_dir):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# settings\nseed = 4\ntrain = {synth_dir / 'train.csv'}\nd_model = 16\n"
                   "n_heads = 2\nn_layers = 1\nwindow_len = 10\nmax_epochs = 1\ntrain_stride = 20\n")
    assert run_cli(["train", "--config", str(cfg), "--d-model", "8", "--out", str(tmp_path / "o")]) == 0
    m = read_config(tmp_path / "o" / "manifest.txt")
    assert m["d_model"] == "8" and m["seed"] == "4" and m["input_dim"] == "2"


@pytest.mark.parametrize(
    "argv, code",
    [
        (["train", "--bogus", "1"], 1),
        (["frobnicate"], 1),
        ([], 1),
        (["synth", "--out", "x"], 1),  # seed is mandatory
        (["train", "--seed", "1", "--out", "x", "--train", "missing.csv"], 2),
        (["synth", "--seed", "1", "--fraction", "0.7", "--out", "OUT"], 2),
        (["synth", "--seed", "one", "--out", "OUT"], 1),
    ],
)
def test_exit_codes(tmp_path, argv, code):
    argv = [str(tmp_path / "o") if a == "OUT" else a for a in argv]
    assert run_cli(argv) == code


def test_bad_csv_is_data_error(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n3\n")
    assert run_cli(["train", "--seed", "1", "--train", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_unknown_config_key_is_usage_error(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("seed = 1\nwarp_speed = 9\n")
    assert run_cli(["synth", "--config", str(cfg), "--out", str(tmp_path)]) == 1


def test_parse_datasets():
    assert parse_datasets("a=x.csv,y.csv; b = p,q") == {"a": ("x.csv", "y.csv"), "b": ("p", "q")}


def test_usage_goes_to_stderr_via_entry_point():
    r = subprocess.run([sys.executable, "-m", "amad.cli", "train", "--nope"], capture_output=True, text=True)
    assert r.returncode == 1 and "unrecognized arguments" in r.stderr and r.stdout == ""
