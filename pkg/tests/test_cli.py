import csv
import json
import re

import numpy as np
import pytest
from PIL import Image

from helpers import tiny_config
from splicedet.cli import ABORTED_MARKER, CONFIG_SNAPSHOT, main, render_overlay
from splicedet.config import Config
from splicedet.dataset import load_manifest, load_samples
from splicedet.evaluator import evaluate, ground_truth_from_manifest, read_predictions
from splicedet.model import predict_records
from splicedet.roi_heads import Detection


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["dataset", "synth", "--out", str(root / "fx"), "--n", "10", "--size", "64", "64",
                 "--splices", "3", "3", "--seed", "1"]) == 0
    assert main(["dataset", "build", "--images", str(root / "fx" / "images"), "--annotations",
                 str(root / "fx" / "via_project.json"), "--out", str(root / "ds")]) == 0
    config = root / "tiny.cfg"
    config.write_text(tiny_config().dumps())
    return root, root / "ds" / "manifest.json", config


@pytest.fixture(scope="module")
def trained(dataset):
    root, manifest, config = dataset
    out = root / "run"
    assert main(["train", "--profile", "smoke", "--config", str(config), "--data", str(manifest),
                 "--out", str(out)]) == 0
    return out


def test_build_outputs_and_validate(dataset, capsys):
    root, manifest, _ = dataset
    data = load_manifest(manifest)
    assert len(data["entries"]) == 10
    assert all(len(e["masks"]) == 3 for e in data["entries"])
    assert (root / "ds" / CONFIG_SNAPSHOT).exists()
    assert main(["dataset", "validate", str(manifest)]) == 0


def test_validate_tampered_exits_2(dataset, tmp_path, capsys):
    root, _, _ = dataset
    assert main(["dataset", "build", "--images", str(root / "fx" / "images"), "--annotations",
                 str(root / "fx" / "via_project.json"), "--out", str(tmp_path / "ds")]) == 0
    manifest = load_manifest(tmp_path / "ds" / "manifest.json")
    victim = manifest["entries"][2]["masks"][0]
    Image.fromarray(np.zeros((64, 64), np.uint8)).save(tmp_path / "ds" / victim)
    capsys.readouterr()
    assert main(["dataset", "validate", str(tmp_path / "ds" / "manifest.json")]) == 2
    assert victim in capsys.readouterr().err


def test_stats(dataset, capsys):
    _, manifest, _ = dataset
    assert main(["dataset", "stats", str(manifest), "--json"]) == 0
    stats = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert (stats["total"], stats["authentic"], stats["spliced"]) == (10, 0, 10)


def test_data_root_env(dataset, monkeypatch):
    root, _, _ = dataset
    monkeypatch.setenv("SPLICEDET_DATA_ROOT", str(root / "ds"))
    assert main(["dataset", "validate", "manifest.json"]) == 0


def test_usage_errors(dataset, capsys):
    _, manifest, _ = dataset
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 1
    assert main(["params", "--override", "NOT_A_KEY=3"]) == 1
    assert main(["dataset", "stats", "/nonexistent/manifest.json"]) == 2


def test_train_outputs(trained, dataset):
    cfg = Config.load(trained / CONFIG_SNAPSHOT)
    assert cfg == Config.loads(tiny_config().dumps())
    rows = list(csv.reader(open(trained / "train_log.csv")))
    assert len(rows) - 1 == cfg.EPOCHS * cfg.STEPS_PER_EPOCH
    assert (trained / "final.ckpt").exists()
    assert not (trained / ABORTED_MARKER).exists()


def test_train_deterministic_rerun(trained, dataset, tmp_path):
    _, manifest, config = dataset
    assert main(["train", "--profile", "smoke", "--config", str(config), "--data", str(manifest),
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "train_log.csv").read_bytes() == (trained / "train_log.csv").read_bytes()


def test_train_abort_marker(dataset, tmp_path):
    _, manifest, config = dataset
    code = main(["train", "--profile", "smoke", "--config", str(config), "--override", "LEARNING_RATE=1e30",
                 "--override", "GRADIENT_CLIP_NORM=None", "--override", "LR_DROPS=()", "--data", str(manifest),
                 "--out", str(tmp_path)])
    assert code == 3
    assert (tmp_path / ABORTED_MARKER).exists()
    assert (tmp_path / "train_log.csv").exists()


def test_kfold_creates_fold_dirs(dataset, tmp_path):
    _, manifest, config = dataset
    assert main(["kfold", "--profile", "smoke", "--config", str(config), "--override", "EPOCHS=1",
                 "--override", "LR_DROPS=()", "--override", "STEPS_PER_EPOCH=2", "--data", str(manifest),
                 "--k", "5", "--out", str(tmp_path)]) == 0
    assert sorted(p.name for p in tmp_path.glob("fold_*")) == [f"fold_{i}" for i in range(5)]
    folds = json.loads((tmp_path / "folds.json").read_text())["folds"]
    vals = sum((v for _, v in folds), [])
    assert len(vals) == len(set(vals))
    summary = json.loads((tmp_path / "mean_metrics.json").read_text())
    assert summary["mean"]["f1"] == pytest.approx(np.mean([f["f1"] for f in summary["per_fold"]]))


def test_detect_threshold_maxed_is_empty(trained, dataset, tmp_path, capsys):
    root, _, _ = dataset
    image = sorted((root / "fx" / "images").iterdir())[0]
    capsys.readouterr()
    assert main(["detect", "--checkpoint", str(trained / "final.ckpt"), "--min-confidence", "1.0",
                 "--out", str(tmp_path), str(image)]) == 0
    assert capsys.readouterr().out.strip() == f"{image.stem}: forged 0.00% (0 region(s))"
    doc = json.loads((tmp_path / "detections.json").read_text())
    assert doc[0]["detections"] == [] and doc[0]["forged_percentage"] == 0.0
    overlay = np.asarray(Image.open(tmp_path / f"{image.stem}_overlay.png"))
    assert np.array_equal(overlay, np.asarray(Image.open(image).convert("RGB")))


def test_detect_json_roundtrip_and_eval_composes(trained, dataset, tmp_path, capsys):
    root, manifest, _ = dataset
    images = sorted((root / "fx" / "images").iterdir())[:4]
    assert main(["detect", "--checkpoint", str(trained / "final.ckpt"), "--min-confidence", "0.0",
                 "--out", str(tmp_path / "det")] + [str(p) for p in images]) == 0
    raw = json.loads((tmp_path / "det" / "detections.json").read_text())
    parsed = read_predictions(tmp_path / "det" / "detections.json")
    assert [r["image_id"] for r in raw] == list(parsed)
    for item in raw:
        rec = parsed[item["image_id"]]
        assert len(rec.instances) == len(item["detections"])
        for d, i in zip(item["detections"], rec.instances):
            assert list(i.box) == d["box"] and i.score == d["score"]

    # in-process predictions on the same images give identical metrics
    from splicedet.cli import model_from_checkpoint
    model = model_from_checkpoint(trained / "final.ckpt", ["DETECTION_MIN_CONFIDENCE=0.0"])
    samples = [s for s in load_samples(load_manifest(manifest)) if s.source_id in {p.stem for p in images}]
    gts = {k: v for k, v in ground_truth_from_manifest(manifest).items() if k in parsed}
    in_process = evaluate(predict_records(model, samples, 0.0), gts)
    from_files = evaluate(parsed, gts)
    assert in_process.to_dict() == from_files.to_dict()


def test_overlay_pixels_equal_mask_support():
    rng = np.random.default_rng(0)
    image = np.zeros((40, 50, 3), np.uint8)
    masks = []
    for k in range(3):
        m = np.zeros((40, 50), np.uint8)
        y, x = rng.integers(0, 30), rng.integers(0, 40)
        m[y:y + 8, x:x + 9] = 1
        masks.append(m)
    dets = [Detection((0, 0, 1, 1), 1, 0.9, np.zeros((28, 28)), m) for m in masks]
    out = render_overlay(image, dets, draw_boxes=False, draw_captions=False)
    changed = np.any(out != image, axis=2)
    assert np.array_equal(changed, np.logical_or.reduce([m.astype(bool) for m in masks]))


def test_eval_self_is_perfect(dataset, tmp_path, capsys):
    _, manifest, _ = dataset
    from splicedet.evaluator import predictions_to_json
    doc = predictions_to_json(ground_truth_from_manifest(manifest).values())
    (tmp_path / "gt_as_preds.json").write_text(json.dumps(doc))
    capsys.readouterr()
    assert main(["eval", "--predictions", str(tmp_path / "gt_as_preds.json"), "--ground-truth", str(manifest),
                 "--out", str(tmp_path / "ev")]) == 0
    metrics = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    for key in ("precision", "recall", "f1", "ap", "ap50", "ap75"):
        assert metrics[key] == 1.0
    assert capsys.readouterr().out.startswith("F1-Score,")


def test_eval_schema_violation(dataset, tmp_path, capsys):
    _, manifest, _ = dataset
    (tmp_path / "bad.json").write_text(json.dumps([{"image_id": "x", "detections": [{"box": [0, 0, 1], "score": 0.2}]}]))
    capsys.readouterr()
    assert main(["eval", "--predictions", str(tmp_path / "bad.json"), "--ground-truth", str(manifest)]) == 2
    assert "$[0].detections[0].box" in capsys.readouterr().err


def test_params(capsys, tmp_path):
    assert main(["params", "--per-layer", "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    nums = {k: int(v.replace(",", "")) for k, v in re.findall(r"^(Total|Trainable|Non-trainable) params: ([\d,]+)$",
                                                             text, re.M)}
    assert nums["Total"] == nums["Trainable"] + nums["Non-trainable"]
    assert abs(nums["Total"] - 23_812_574) / 23_812_574 <= 0.02
    assert "backbone." in text
    assert (tmp_path / CONFIG_SNAPSHOT).exists()


def test_synth_radius_and_split_counts(tmp_path):
    assert main(["dataset", "synth", "--out", str(tmp_path / "fx"), "--n", "5", "--size", "128", "128",
                 "--splices", "3", "4", "--radius", "14", "22", "--seed", "0"]) == 0
    assert main(["dataset", "build", "--images", str(tmp_path / "fx" / "images"), "--annotations",
                 str(tmp_path / "fx" / "via_project.json"), "--out", str(tmp_path / "ds"),
                 "--split-counts", "5", "0", "0"]) == 0
    entries = load_manifest(tmp_path / "ds" / "manifest.json")["entries"]
    assert [e["split"] for e in entries] == ["train"] * 5
    for e in entries:
        for verts in e["regions"]:
            xs, ys = zip(*verts)
            assert max(max(xs) - min(xs), max(ys) - min(ys)) <= 44 + 1e-9
