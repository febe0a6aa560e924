import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from bihl.cli import main
from bihl.imgpyr import enumerate_scales, read_image
from bihl.synth import synthetic_corpus, write_corpus


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    images = root / "images"
    ann = write_corpus(synthetic_corpus(6, seed=21, prefix="c"), str(images))
    model = root / "model.json"
    assert main(["train", "--images", str(images), "--annotations", ann, "--model", str(model),
                 "--epochs", "5", "--threads", "1"]) == 0
    return {"root": root, "images": str(images), "ann": ann, "model": str(model)}


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_train_reports_samples(workspace, tmp_path, capsys):
    out = tmp_path / "m.json"
    assert main(["train", "--images", workspace["images"], "--annotations", workspace["ann"],
                 "--model", str(out), "--epochs", "2"]) == 0
    text = capsys.readouterr().out
    assert "positive" in text and "loss:" in text
    assert json.loads(out.read_text())


def test_missing_annotations_exit_2(workspace, tmp_path, capsys):
    missing = str(tmp_path / "nope.txt")
    code = main(["train", "--images", workspace["images"], "--annotations", missing, "--model", str(tmp_path / "m.json")])
    assert code == 2
    assert missing in capsys.readouterr().err


def test_bad_ng_exit_2(workspace, tmp_path, capsys):
    code = main(["train", "--images", workspace["images"], "--annotations", workspace["ann"],
                 "--model", str(tmp_path / "m.json"), "--ng", "9"])
    assert code == 2
    assert "ng must be in 1..8" in capsys.readouterr().err


def test_unknown_flag_exit_2(capsys):
    assert main(["propose", "--bogus"]) == 2


def test_missing_model_exit_2(workspace, tmp_path):
    assert main(["propose", "--images", workspace["images"], "--model", str(tmp_path / "x.json")]) == 2


def test_propose_max_rows(workspace, tmp_path):
    out = tmp_path / "p.csv"
    assert main(["propose", "--images", workspace["images"], "--model", workspace["model"],
                 "--out", str(out), "--max", "100"]) == 0
    rows = read_rows(out)
    header, body = rows[0], rows[1:]
    assert header[0] == "image"
    per_image = {}
    for r in body:
        per_image[r[0]] = per_image.get(r[0], 0) + 1
    assert per_image and max(per_image.values()) <= 100


def test_no_merge_has_template_geometry(workspace, tmp_path):
    out = tmp_path / "p.csv"
    assert main(["propose", "--images", workspace["images"], "--model", workspace["model"],
                 "--out", str(out), "--no-merge", "--max", "500"]) == 0
    rows = read_rows(out)
    templates = {(16 << s.n, 16 << s.m) for s in enumerate_scales()}
    assert len(rows) > 1
    assert all((int(r[3]), int(r[4])) in templates for r in rows[1:])


def test_jsonl_format(workspace, tmp_path):
    out = tmp_path / "p.jsonl"
    assert main(["propose", "--images", workspace["images"], "--model", workspace["model"],
                 "--out", str(out), "--format", "jsonl", "--max", "5"]) == 0
    lines = [json.loads(l) for l in out.read_text().splitlines()]
    assert lines and {"image", "x", "y", "w", "h", "score"} <= set(lines[0])


def test_dump_features_and_grid(workspace, tmp_path):
    feats, grid = tmp_path / "f", tmp_path / "g"
    assert main(["propose", "--images", workspace["images"], "--model", workspace["model"], "--out", str(tmp_path / "p.csv"),
                 "--dump-features", str(feats), "--dump-grid", str(grid), "--threads", "1"]) == 0
    assert len(os.listdir(feats)) == 6 * 17
    assert len(os.listdir(grid)) == 6


def test_eval_with_gt_as_proposals(workspace, tmp_path):
    props = tmp_path / "gt.csv"
    with open(props, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image", "x", "y", "w", "h", "score"])
        with open(workspace["ann"]) as ann:
            for line in ann:
                name, _, x, y, bw, bh = line.strip().split(",")
                w.writerow([name, x, y, bw, bh, 1.0])
    report = tmp_path / "rep"
    assert main(["eval", "--proposals", str(props), "--annotations", workspace["ann"], "--out", str(report)]) == 0
    data = json.loads((tmp_path / "rep.json").read_text())
    assert data["detection_rate"] == 1.0 and data["mabo"] == 1.0
    assert (tmp_path / "rep.csv").exists()


def test_eval_runs_proposer(workspace, tmp_path):
    assert main(["eval", "--images", workspace["images"], "--model", workspace["model"],
                 "--annotations", workspace["ann"], "--out", str(tmp_path / "r")]) == 0
    data = json.loads((tmp_path / "r.json").read_text())
    assert 0.0 <= data["detection_rate"] <= 1.0 and data["mean_time_s"] > 0


def test_repeat_identity(workspace, tmp_path):
    out = tmp_path / "rep.csv"
    assert main(["repeat", "--images", workspace["images"], "--model", workspace["model"],
                 "--kind", "identity", "--out", str(out)]) == 0
    rows = read_rows(out)
    assert rows[0] == ["kind", "level", "repeatability"]
    assert float(rows[1][2]) == 1.0


def test_repeat_bad_level_exit_2(workspace):
    assert main(["repeat", "--images", workspace["images"], "--model", workspace["model"],
                 "--kind", "jpeg", "--level", "7"]) == 2


def test_perturb_jpeg_quality_5(workspace, tmp_path):
    out = tmp_path / "pj"
    assert main(["perturb", "--images", workspace["images"], "--kind", "jpeg", "--level", "3", "--out", str(out)]) == 0
    mapping = json.loads((out / "mapping.json").read_text())
    assert mapping["level"] == 5
    jpgs = sorted(p for p in os.listdir(out) if p.endswith(".jpg"))
    assert len(jpgs) == 6
    raw = (out / jpgs[0]).read_bytes()
    assert raw[:2] == b"\xff\xd8"
    assert read_image(str(out / jpgs[0])).width > 0


def test_perturb_scale_writes_mapping(workspace, tmp_path):
    out = tmp_path / "ps"
    assert main(["perturb", "--images", workspace["images"], "--kind", "scale", "--level", "3", "--out", str(out)]) == 0
    mapping = json.loads((out / "mapping.json").read_text())
    entry = next(iter(mapping["images"].values()))
    assert np.allclose(np.array(entry["forward"])[:, :2], np.eye(2) * 2, atol=0.01)


def test_synth(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "s"), "--count", "3", "--seed", "4"]) == 0
    assert len([f for f in os.listdir(tmp_path / "s") if f.endswith(".pgm")]) == 3


def test_propose_deterministic_bytes(workspace, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    base = ["propose", "--images", workspace["images"], "--model", workspace["model"]]
    assert main(base + ["--out", str(a), "--threads", "1"]) == 0
    assert main(base + ["--out", str(b), "--threads", "3"]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_module_entry_point(workspace):
    res = subprocess.run([sys.executable, "-m", "bihl", "propose", "--images", workspace["images"],
                          "--model", workspace["model"], "--max", "3"], capture_output=True, text=True)
    assert res.returncode == 0
    assert res.stdout.splitlines()[0].startswith("image,")


def test_perturb_blur_writes_png(workspace, tmp_path):
    out = tmp_path / "pb"
    assert main(["perturb", "--images", workspace["images"], "--kind", "blur", "--level", "0", "--out", str(out)]) == 0
    pngs = sorted(p for p in os.listdir(out) if p.endswith(".png"))
    assert len(pngs) == 6
    src = read_image(os.path.join(workspace["images"], pngs[0][:-4] + ".pgm"))
    assert read_image(str(out / pngs[0])).data.shape == src.data.shape
