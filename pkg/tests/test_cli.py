import csv
import json
import subprocess
import sys
import xml.etree.ElementTree as ET

import pytest

from oct1d.cli import main, read_config_file
from oct1d.training import read_runs

DATASET = "synth:sine:4:16:7"


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_train_appends_records(tmp_path, capsys):
    out = tmp_path / "results"
    code = main(["train", "--dataset", DATASET, "--model", "octfcn", "--runs", "3", "--profile", "desk",
                 "--epochs", "2", "--out", str(out)])
    assert code == 0
    assert len(rows(out / "runs.csv")) == 3
    agg = json.loads((out / "synth-sine-4-16-7" / "octfcn.json").read_text())
    assert agg["n_runs"] == 3
    assert "mean=" in capsys.readouterr().out


def test_repeated_invocation_appends_identical_accuracies(tmp_path):
    out = tmp_path / "results"
    argv = ["train", "--dataset", DATASET, "--model", "fcn", "--runs", "2", "--epochs", "2", "--out", str(out)]
    assert main(argv) == 0 and main(argv) == 0
    r = rows(out / "runs.csv")
    assert len(r) == 4
    assert [x["accuracy"] for x in r[:2]] == [x["accuracy"] for x in r[2:]]


def test_unknown_model_is_config_error(tmp_path, capsys):
    code = main(["train", "--dataset", DATASET, "--model", "transformer", "--out", str(tmp_path)])
    assert code == 2
    assert "model" in capsys.readouterr().err


@pytest.mark.parametrize("argv,field", [
    (["train", "--dataset", DATASET, "--model", "fcn", "--alpha", "2"], "alpha"),
    (["train", "--dataset", DATASET, "--model", "fcn", "--epochs", "zero"], "epochs"),
    (["train", "--model", "fcn"], "dataset"),
    (["train", "--dataset", "NoSuchSet", "--model", "fcn"], "dataset"),
    (["train", "--dataset", DATASET, "--model", "fcn", "--profile", "huge"], "profile"),
    (["compare", "--results", "missing.csv"], "results"),
    (["compare", "--results", "missing.csv", "--metric", "median"], "metric"),
])
def test_config_errors_name_the_field(argv, field, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("OCT1D_DATA_DIR", str(tmp_path))
    assert main(argv) == 2
    assert f"{field}:" in capsys.readouterr().err


def test_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# tiny run\ndataset = {DATASET}\nmodel = fcn\nepochs = 1\nruns = 2\nout = {tmp_path / 'a'}\n")
    assert read_config_file(cfg)["runs"] == "2"
    assert main(["train", "--config", str(cfg), "--runs", "1", "--model", "octfcn"]) == 0
    records = read_runs(tmp_path / "a" / "runs.csv")
    assert len(records) == 1 and records[0].model == "octfcn" and records[0].epochs == 1


def test_config_file_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("modle = fcn\n")
    assert main(["train", "--config", str(cfg)]) == 2
    assert "modle" in capsys.readouterr().err


def write_runs(path, table):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "model", "run", "seed", "accuracy", "params", "epochs", "seconds"])
        for model, accs in table.items():
            for d, per_run in enumerate(accs):
                for run, acc in enumerate(per_run):
                    w.writerow([f"d{d}", model, run, run, acc, 10, 5, 0.1])


def test_compare_outputs(tmp_path):
    runs = tmp_path / "runs.csv"
    write_runs(runs, {
        "fcn": [[0.8, 0.9], [0.7, 0.7], [0.6, 0.8], [0.9, 0.95]],
        "octfcn": [[0.85, 0.95], [0.75, 0.8], [0.7, 0.8], [0.92, 0.96]],
    })
    ext = tmp_path / "external_sota.csv"
    ext.write_text("model,dataset,accuracy\nhive,d0,0.9\nhive,d1,0.6\nhive,d2,0.65\nhive,d3,0.99\n")
    out = tmp_path / "reports"
    assert main(["compare", "--results", str(runs), "--external", str(ext), "--metric", "max", "--out", str(out)]) == 0
    names = sorted(p.name for p in out.glob("wsrt_*.json"))
    assert names == ["wsrt_fcn_vs_hive.json", "wsrt_fcn_vs_octfcn.json", "wsrt_hive_vs_octfcn.json"]
    rep = json.loads((out / "wsrt_fcn_vs_octfcn.json").read_text())
    # max accuracies: octfcn wins on d0, d1, d3; d2 ties at 0.8
    assert rep["zeros"] == 1 and rep["n_used"] == 3 and rep["better"] == "octfcn"
    assert rep["p_value"] == 0.25 and rep["p_holm"] >= rep["p_value"]
    ET.fromstring((out / "cd.svg").read_text())
    first = (out / "cd.svg").read_bytes()
    assert main(["compare", "--results", str(runs), "--external", str(ext), "--metric", "max", "--out", str(out)]) == 0
    assert (out / "cd.svg").read_bytes() == first


def test_compare_incomplete_table(tmp_path, capsys):
    runs = tmp_path / "runs.csv"
    write_runs(runs, {"fcn": [[0.8], [0.7]], "octfcn": [[0.85]]})
    assert main(["compare", "--results", str(runs), "--out", str(tmp_path / "r")]) == 2
    assert "(octfcn, d1)" in capsys.readouterr().err


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--shapes", "1"]) == 0
    out = capsys.readouterr().out
    for family in ("conv1d", "lstm", "attention", "oct_path_lh", "softmax_cross_entropy"):
        assert family in out
    assert "max_rel_err=" in out and "passed" in out


def test_ablate_command(tmp_path):
    out = tmp_path / "ablation"
    assert main(["ablate", "--dataset", DATASET, "--model", "fcn", "--epochs", "1", "--filters", "2",
                 "--svm-epochs", "10", "--out", str(out)]) == 0
    folder = out / "synth-sine-4-16-7" / "fcn"
    for name in ("features_train.csv", "features_test.csv", "svm_report.json", "activations.csv", "layer1.svg",
                 "layer3.svg", "model.bin"):
        assert (folder / name).exists(), name


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "oct1d", "train", "--model", "nope", "--dataset", DATASET],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "model" in proc.stderr
