import json

import pytest

from fqint.calibration import load_dataset, load_model
from fqint.cli import main
from fqint.model import QuantizedEncoderModel


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    common = ["--tokens", "8"]
    assert main(["init-model", "--out", str(root / "float.fqm"), "--embed-dim", "32", "--heads", "2",
                 "--depth", "1", *common]) == 0
    assert main(["gen-data", "--out", str(root / "data"), "--n", "80", "--channels", "32", "--labels",
                 *common]) == 0
    assert main(["gen-data", "--kind", "channel-variance", "--out", str(root / "wide"), "--n", "40",
                 "--channels", "32", *common]) == 0
    return root


def test_gen_data_and_init(workspace):
    data, labels = load_dataset(workspace / "data")
    assert data.shape == (80, 8, 32) and labels.shape == (80,)
    assert load_model(workspace / "float.fqm").config.embed_dim == 32


def test_calibrate_and_eval(workspace):
    out = workspace / "q.fqm"
    assert main(["calibrate", "--model", str(workspace / "float.fqm"), "--data", str(workspace / "data"),
                 "--samples", "60", "--bits", "8,8,4", "--out", str(out)]) == 0
    assert isinstance(load_model(out), QuantizedEncoderModel)
    rep = workspace / "eval.json"
    assert main(["eval", "--model", str(out), "--reference", str(workspace / "float.fqm"),
                 "--data", str(workspace / "data"), "--limit", "10", "--out", str(rep)]) == 0
    doc = json.loads(rep.read_text())
    assert doc["samples"] == 10 and 0.9 < doc["cosine_mean"] <= 1.0 and "accuracy" in doc


def test_reports(workspace, capsys):
    assert main(["report", "ranges", "--model", str(workspace / "float.fqm"),
                 "--data", str(workspace / "wide")]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["layers"]["blocks.0.ln1.in"]["range_ratio"] > 20
    assert main(["report", "attn-hist", "--model", str(workspace / "float.fqm"),
                 "--data", str(workspace / "data"), "--bins", "8"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert len(doc["counts"]) == 8


def test_sweep_k(workspace, capsys):
    assert main(["sweep-k", "--model", str(workspace / "float.fqm"), "--data", str(workspace / "wide"),
                 "--kmax", "3"]) == 0
    doc = json.loads(capsys.readouterr().out)
    totals = [doc["total_sq_error"][str(k)] for k in range(4)]
    assert all(b <= a for a, b in zip(totals, totals[1:]))


def test_errors_exit_nonzero(workspace, capsys):
    assert main(["eval", "--model", str(workspace / "nope.fqm"), "--reference", str(workspace / "float.fqm"),
                 "--data", str(workspace / "data")]) == 1
    assert "error" in capsys.readouterr().err
    assert main(["calibrate", "--model", str(workspace / "float.fqm"), "--data", str(workspace / "data"),
                 "--samples", "500", "--out", str(workspace / "x.fqm")]) == 1
    with pytest.raises(SystemExit):
        main(["calibrate", "--bits", "8,8"])
