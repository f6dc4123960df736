import csv
import filecmp
import json

import pytest

from protoparts.cli import main

TINY = {
    "data": {"patches_per_class": 12, "augmentation_factor": 1},
    "backbone": {"block_channels": [4, 8, 8], "add_on_dim": 8},
    "train": {"epochs_warmup": 1, "epochs_joint": 1, "push_every": 1, "epochs_last_layer": 1},
    "embedding": {"k_neighbors": 5, "epochs": 20},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "c.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["synth", "--config", str(cfg), "--seed", "7", "--out", str(root / "ds")]) == 0
    assert main(["train", "--config", str(cfg), "--seed", "7", "--data", str(root / "ds"),
                 "--out", str(root / "run")]) == 0
    return root, cfg


def _same_tree(a, b, ignore=("resolved-config.json",)):
    c = filecmp.dircmp(a, b, ignore=list(ignore))
    if c.left_only or c.right_only:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, c.common_files, shallow=False)
    return not mismatch and not errors and all(_same_tree(a / d, b / d, ignore) for d in c.common_dirs)


def test_synth_twice_identical(workspace):
    root, cfg = workspace
    assert main(["synth", "--config", str(cfg), "--seed", "7", "--out", str(root / "ds2")]) == 0
    assert _same_tree(root / "ds", root / "ds2")
    a = json.loads((root / "ds" / "resolved-config.json").read_text())
    b = json.loads((root / "ds2" / "resolved-config.json").read_text())
    a["args"].pop("out"), b["args"].pop("out")
    assert a == b


def test_end_to_end_eval(workspace):
    root, cfg = workspace
    out = root / "ev"
    assert main(["eval", "--checkpoint", str(root / "run" / "model.ppks"), "--data", str(root / "ds"),
                 "--out", str(out)]) == 0
    report = json.loads((out / "metrics.json").read_text())
    assert {"accuracy", "weighted_precision", "weighted_recall", "weighted_f1"} <= set(report)
    with open(out / "predictions.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["image_id", "true", "pred", "max_logit"] and len(rows) == 1 + 6 * 2  # 12 per class, 80/20 -> 2 test each
    resolved = json.loads((out / "resolved-config.json").read_text())
    assert resolved["command"] == "eval" and "train" in resolved and "embedding" in resolved


def test_remaining_commands(workspace, capsys):
    root, cfg = workspace
    ck = str(root / "run" / "model.ppks")
    img = next((root / "ds" / "test" / "AU").glob("*.png"))
    assert main(["explain", "--checkpoint", ck, "--image", str(img), "--k", "2", "--out", str(root / "ex")]) == 0
    assert (root / "ex" / img.stem / "report.json").exists()
    assert main(["embed", "--config", str(cfg), "--checkpoint", ck, "--data", str(root / "ds"),
                 "--out", str(root / "em")]) == 0
    assert (root / "em" / "embedding.csv").read_text().startswith("umap1,umap2,umap3,label,split,point_id")
    assert main(["push", "--checkpoint", ck, "--data", str(root / "ds"), "--out", str(root / "pu")]) == 0
    capsys.readouterr()
    assert main(["inspect", "--checkpoint", ck, "--out", str(root / "in")]) == 0
    header = json.loads(capsys.readouterr().out)
    assert header["P"] == 60 and header["class_names"][0] == "AU"
    assert main(["train-baseline", "--config", str(cfg), "--data", str(root / "ds"),
                 "--out", str(root / "bl")]) == 0
    assert main(["eval", "--checkpoint", str(root / "bl" / "baseline.ppks"), "--data", str(root / "ds"),
                 "--out", str(root / "blev")]) == 0
    for d in ("ex", "em", "pu", "in", "bl", "blev"):
        assert (root / d / "resolved-config.json").exists()


def test_usage_errors(tmp_path, capsys):
    assert main(["eval", "--data", str(tmp_path), "--out", str(tmp_path)]) == 1
    assert "usage" in capsys.readouterr().err
    assert main(["frobnicate"]) == 1
    assert main(["synth", "--bogus-flag"]) == 1
    assert main([]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": 1}))
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1


def test_runtime_failures(workspace, tmp_path):
    root, cfg = workspace
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ppks"), "--data", str(root / "ds"),
                 "--out", str(tmp_path / "o")]) == 2
    other = tmp_path / "other.json"
    other.write_text(json.dumps({**TINY, "data": {**TINY["data"], "classes": ["AU", "WW"]}}))
    assert main(["synth", "--config", str(other), "--out", str(tmp_path / "ds2")]) == 0
    assert main(["eval", "--checkpoint", str(root / "run" / "model.ppks"), "--data", str(tmp_path / "ds2"),
                 "--out", str(tmp_path / "o2")]) == 2
