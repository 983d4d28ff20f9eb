import json

import numpy as np
import pytest

from repxray.cli import main
from repxray.data import read_image, write_png
from repxray.model import CLASS_NAMES


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--n", "10", "--seed", "1"]) == 0
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "m.rvxr"), "--epochs", "1",
                 "--seed", "0"]) == 0
    return root


def probs_from(out):
    lines = [l for l in out.splitlines() if l.split()[0] in CLASS_NAMES]
    return np.array([float(l.split()[1]) for l in lines])


def test_train_outputs(workspace):
    assert (workspace / "m.rvxr").exists()
    log = (workspace / "m.log.csv").read_text().splitlines()
    assert log[0] == "epoch,loss,train_accuracy,test_accuracy" and len(log) == 2


def test_fuse_then_classify_agrees(workspace, capsys):
    assert main(["fuse", "--model", str(workspace / "m.rvxr"), "--out", str(workspace / "f.rvxr")]) == 0
    out = capsys.readouterr().out
    div = float(out.strip().splitlines()[-1].split()[-1])
    assert div <= 1e-4
    img = str(workspace / "data" / "covid" / "covid_0000.png")
    main(["classify", "--model", str(workspace / "m.rvxr"), "--image", img])
    a = capsys.readouterr().out
    main(["classify", "--model", str(workspace / "f.rvxr"), "--image", img])
    b = capsys.readouterr().out
    assert a.splitlines()[0] == b.splitlines()[0] and a.startswith("predicted: ")
    np.testing.assert_allclose(probs_from(a), probs_from(b), atol=1e-5)
    assert main(["fuse", "--model", str(workspace / "f.rvxr"), "--out", str(workspace / "g.rvxr")]) == 1


def test_classify_resizes_with_note(workspace, capsys, rng):
    write_png(workspace / "big.png", rng.random((80, 100)))
    assert main(["classify", "--model", str(workspace / "m.rvxr"), "--image", str(workspace / "big.png")]) == 0
    out = capsys.readouterr().out
    assert out.startswith("note: resized 100x80 -> 64x64")
    assert abs(probs_from(out).sum() - 1) < 1e-5


def test_explain_writes_overlay(workspace):
    img = workspace / "data" / "pneumonia" / "pneumonia_0001.png"
    out = workspace / "cam.png"
    assert main(["explain", "--model", str(workspace / "m.rvxr"), "--image", str(img), "--class", "pneumonia",
                 "--out", str(out)]) == 0
    from PIL import Image
    with Image.open(out) as im:
        assert im.mode == "RGB" and im.size == (64, 64)
    assert main(["explain", "--model", str(workspace / "m.rvxr"), "--image", str(img), "--class", "1",
                 "--block", "9", "--out", str(out)]) == 1


def test_hog_command(workspace, capsys):
    img = workspace / "data" / "normal" / "normal_0000.png"
    out, roi = workspace / "hog.png", workspace / "roi.txt"
    assert main(["hog", "--image", str(img), "--out", str(out), "--roi-out", str(roi)]) == 0
    assert "descriptor length 1764" in capsys.readouterr().out
    assert read_image(out).shape == (64, 64)
    assert roi.read_text().splitlines()[0] == "x y width height side"


def test_evaluate_report_schema(workspace):
    report = workspace / "rep" / "report.json"
    assert main(["evaluate", "--model", str(workspace / "f.rvxr"), "--data", str(workspace / "data"),
                 "--report", str(report)]) == 0
    doc = json.loads(report.read_text())
    assert 0 <= doc["overall_accuracy"] <= 1
    assert [c["name"] for c in doc["classes"]] == list(CLASS_NAMES)
    for c in doc["classes"]:
        assert {"tp", "tn", "fp", "fn", "precision", "sensitivity", "f1", "accuracy", "auc"} <= set(c)
    assert any(f["model"] == "ResNet50" and f["accuracy"] == 0.8563 for f in doc["fixtures"])
    for name in CLASS_NAMES:
        assert (report.parent / f"report_roc_{name}.csv").read_text().startswith("fpr,tpr\n")


def test_error_exit_codes(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.rvxr"
    bad.write_bytes(b"NOPE" + b"\0" * 20)
    img = str(workspace / "data" / "covid" / "covid_0000.png")
    assert main(["classify", "--model", str(bad), "--image", img]) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["type"] == "BadMagicError"
    assert main(["classify", "--model", str(tmp_path / "missing.rvxr"), "--image", img]) == 2
    assert main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "x.rvxr"), "--seed", "0"]) == 1
    assert main(["synth", "--out", str(tmp_path / "s"), "--n", "3", "--seed", "0"]) == 1
    with pytest.raises(SystemExit):
        main(["explain", "--model", "m", "--image", "i", "--out", "o", "--class", "flu"])
