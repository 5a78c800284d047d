import csv
import hashlib

import pytest

from ppc.cli import main

SMALL = ["--n-train", "8", "--n-eval", "4", "--image-size", "32"]


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def data_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "d.bin"
    assert main(["gen-data", "--seed", "1", "--out", str(path)] + SMALL) == 0
    return path


def test_gen_data_deterministic(tmp_path, data_file):
    other = tmp_path / "e.bin"
    assert main(["gen-data", "--seed", "1", "--out", str(other)] + SMALL) == 0
    assert sha(other) == sha(data_file)
    assert main(["gen-data", "--seed", "2", "--out", str(other)] + SMALL) == 0
    assert sha(other) != sha(data_file)


def test_usage_errors_exit_1(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "x"), "--classes", "many"]) == 1
    assert main(["gen-data"]) == 1
    assert main(["train", "--data", str(tmp_path / "missing.bin")]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["train", "--no-such-flag"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 1
    assert "error" in capsys.readouterr().err


def test_config_file(tmp_path, data_file):
    cfg = tmp_path / "c.txt"
    cfg.write_text("# quick run\nepochs = 1\nbatch_size=4\nk=8\nn_per_class=8\n")
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--data", str(data_file), "--out-dir", str(out), "--seed", "2"]) == 0
    report = (out / "report.txt").read_text()
    assert "epochs=1" in report and "seed=2" in report and report.startswith("#")
    cfg.write_text("epochz=1\n")
    assert main(["train", "--config", str(cfg), "--data", str(data_file)]) == 1
    cfg.write_text("epochs one\n")
    assert main(["train", "--config", str(cfg), "--data", str(data_file)]) == 1


def test_train_then_eval(tmp_path, data_file):
    out = tmp_path / "run"
    args = ["train", "--data", str(data_file), "--out-dir", str(out), "--epochs", "2", "--batch-size", "4",
            "--k", "8", "--n-per-class", "8", "--no-sampling"]
    assert main(args) == 0
    rows = list(csv.DictReader((out / "metrics.csv").open()))
    assert len(rows) == 2 and list(rows[0]) == ["epoch", "l_cls", "l_cp", "l_cc", "l_intra", "l_contrast",
                                                "seed_miou", "best_theta"]
    first = sha(out / "metrics.csv")
    assert main(args) == 0 and sha(out / "metrics.csv") == first
    curve = tmp_path / "curve.csv"
    assert main(["eval-seeds", "--data", str(data_file), "--params", str(out / "params.npz"),
                 "--out", str(curve)]) == 0
    lines = curve.read_text().splitlines()
    assert lines[0] == "theta,miou" and len(lines) == 18
    assert main(["eval-seeds", "--data", str(data_file), "--params", str(out / "params.npz"),
                 "--thresholds", "0.2:0.4:0.1"]) == 0
    assert main(["eval-seeds", "--data", str(data_file), "--params", str(tmp_path / "none.npz")]) == 1


def test_gradcheck_exit_codes(capsys):
    assert main(["gradcheck", "--seed", "1"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 4
    assert main(["gradcheck", "--seed", "1", "--corrupt"]) == 2
    assert capsys.readouterr().out.count("FAIL") == 4


def test_ablate_small(tmp_path, data_file, capsys):
    out = tmp_path / "abl"
    assert main(["ablate", "--data", str(data_file), "--out-dir", str(out), "--epochs", "1", "--batch-size", "4",
                 "--k", "8", "--n-per-class", "8", "--seeds", "0", "--k-values", "4",
                 "--transforms", "rescale;rescale,hflip"]) == 0
    table = (out / "ablation.csv").read_text().splitlines()
    assert len(table) == 1 + 6 + 1 + 2
    assert main(["ablate", "--data", str(data_file), "--jobs", "0"]) == 1


def test_thread_limit_env(monkeypatch, data_file, tmp_path):
    monkeypatch.setenv("PPC_THREADS", "x")
    assert main(["gradcheck"]) == 1
    monkeypatch.setenv("PPC_THREADS", "1")
    assert main(["gen-data", "--out", str(tmp_path / "t.bin")] + SMALL) == 0
