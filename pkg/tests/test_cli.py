import json

import pytest

from styleless.cli import gram_summary, main
from styleless.data import load_dataset


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(d / "tr"), "--n", "8", "--seed", "1"]) == 0
    assert main(["gen-data", "--out", str(d / "te"), "--n", "4", "--split", "test"]) == 0
    assert main(["corrupt", "--in", str(d / "te"), "--out", str(d / "te_rain"), "--kind", "rain",
                 "--severity", "2", "--seed", "3"]) == 0
    assert main(["train", "--data", str(d / "tr"), "--epochs", "2", "--seed", "1", "--out", str(d / "ck1")]) == 0
    assert main(["finetune", "--model", str(d / "ck1"), "--data", str(d / "tr"), "--alpha", "0.1",
                 "--sl-lr-mult", "10", "--out", str(d / "ck2")]) == 0
    return d


def test_data_commands(workdir):
    ds = load_dataset(workdir / "te_rain")
    assert ds.name == "test/rain-2" and len(ds) == 4


def test_checkpoints_and_logs(workdir):
    man = json.loads((workdir / "ck2" / "manifest.json").read_text())
    assert man["stage"] == 2 and len(man["insertion_map"]) == 4
    assert json.loads((workdir / "ck2" / "config.json").read_text())["epochs"] == 1
    lines = (workdir / "ck2" / "trainlog.jsonl").read_text().splitlines()
    assert json.loads(lines[0])["L_gram"] == 1.0


def test_eval_report(workdir):
    out = workdir / "r.json"
    assert main(["eval", "--model", str(workdir / "ck2"), "--data", str(workdir / "te_rain"),
                 "--report", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["dataset"] == "test/rain-2" and rep["corruption"]["severity"] == 2
    assert 0 <= rep["miou"] <= 1 and len(rep["model_hash"]) == 64


def test_eval_refuses_other_architectures(workdir, capsys):
    bad = workdir / "bad"
    bad.mkdir()
    man = json.loads((workdir / "ck1" / "manifest.json").read_text())
    man["arch"] = "resnet18"
    (bad / "manifest.json").write_text(json.dumps(man))
    assert main(["eval", "--model", str(bad), "--data", str(workdir / "te")]) == 2
    assert "architecture" in capsys.readouterr().err


def test_finetune_rejects_styleless_checkpoint(workdir):
    assert main(["finetune", "--model", str(workdir / "ck2"), "--data", str(workdir / "tr"),
                 "--out", str(workdir / "ck3")]) == 2


def test_filter_apply(workdir):
    out = workdir / "f.json"
    assert main(["filter-apply", "--model", str(workdir / "ck1"), "--data", str(workdir / "te_rain"),
                 "--filter", "noise", "--p", "10", "--tau", "2", "--seed", "0", "--layers", "0,1",
                 "--report", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["filter"] == {"kind": "noise", "p": 10.0, "tau": 2.0, "seed": 0, "layers": [0, 1]}


def test_gram_analyze(workdir):
    out = workdir / "g.json"
    assert main(["gram-analyze", "--model", str(workdir / "ck1"), "--data", str(workdir / "te"),
                 "--top-k", "3", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert list(rep["layers"]) == ["block1", "block2", "block3", "block4"]
    b4 = rep["layers"]["block4"]
    assert len(b4["diagonal"]) == 64 and len(b4["top_k"]) == 3
    assert b4["top_k"][0]["value"] == b4["max"]


def test_gram_summary_ties():
    import numpy as np
    s = gram_summary(np.array([[1.0, 2.0], [2.0, 0.0]]), top_k=2)
    assert [(e["row"], e["col"]) for e in s["top_k"]] == [(0, 1), (1, 0)]


def test_experiment_command(tmp_path):
    assert main(["experiment", "--protocol", "capacity-ablation", "--seeds", "0", "--out", str(tmp_path),
                 "--n-train", "8", "--n-test", "2", "--epochs", "1"]) == 0
    header = (tmp_path / "capacity-ablation_table.csv").read_text().splitlines()
    assert header[0].startswith("model,test/clean") and [r.split(",")[0] for r in header[1:]] == [
        "baseline", "styleless", "widened"]


def test_bad_arguments():
    with pytest.raises(SystemExit):
        main(["corrupt", "--in", "x", "--out", "y", "--kind", "haze", "--severity", "9"])
    with pytest.raises(SystemExit):
        main(["nope"])
