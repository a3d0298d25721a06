import itertools
import json
import shutil
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from fsannot.cli import main
from fsannot.formats import read_features, read_head, write_gradient
from fsannot.graph import CutConfig, Partition
from fsannot.metric import TrainConfig
from fsannot.projection import ProjectionConfig, fuzzy_knn, layout
from fsannot.session import (
    Session,
    aggregate,
    evaluate,
    gt_constrained_partition,
    oracle_majority_labels,
)

STRIP = np.array([[0.1, 0.1, 0.9, 0.1, 0.1]])
GT_STRIP = np.array([[1, 1, 1, 2, 2]], dtype=np.uint8)


def counter_clock():
    counter = itertools.count()
    return lambda: next(counter)


def write_fixture(tmp_path, n_images=2):
    images, gradients = [], []
    for i in range(n_images):
        rgb = np.repeat(STRIP[:, :, None], 3, axis=2)
        img = tmp_path / f"img{i}.png"
        Image.fromarray((rgb * 255).astype(np.uint8)).save(img)
        grd = tmp_path / f"grad{i}.fsgr"
        write_gradient(grd, STRIP)
        images.append(str(img))
        gradients.append(str(grd))
    return images, gradients


def write_gt_dir(tmp_path, session_dir):
    manifest = json.loads((Path(session_dir) / "session.json").read_text())
    gt_dir = tmp_path / "gt"
    gt_dir.mkdir(exist_ok=True)
    for info in manifest["images"]:
        Image.fromarray(GT_STRIP).save(gt_dir / f"{info['id']}.png")
    return gt_dir


def run_partition(tmp_path, out, threshold=1.0, extra=()):
    images, gradients = write_fixture(tmp_path)
    code = main([
        "partition", "--images", *images, "--gradients", *gradients,
        "--out", str(out), "--criterion", "volume",
        "--threshold", str(threshold), *extra,
    ])
    assert code == 0
    return images, gradients


# ------------------------------------------------------------------ basics


def test_partition_records_cut_verbatim(tmp_path, capsys):
    run_partition(tmp_path, tmp_path / "sess", threshold=1000.0)
    manifest = json.loads((tmp_path / "sess" / "session.json").read_text())
    for info in manifest["images"]:
        assert info["cut"] == {"criterion": "volume", "threshold": 1000.0}
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines == ["img0\t1", "img1\t1"]  # 1000 merges the whole strip


def test_unknown_flag_exits_2_with_usage(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["partition", "--bogus"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_missing_subcommand_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


def test_bad_inputs_exit_nonzero(tmp_path, capsys):
    code = main(["partition", "--images", "a.png", "--gradients", "b.fsgr",
                 "c.fsgr", "--out", str(tmp_path / "x")])
    assert code == 1
    assert "error" in capsys.readouterr().err
    code = main(["iou", "--pred", str(tmp_path / "nope.png"),
                 "--gt", str(tmp_path / "nope.png")])
    assert code == 1


def test_partition_equals_library(tmp_path):
    out = tmp_path / "cli"
    images, gradients = run_partition(tmp_path, out)
    lib_dir = tmp_path / "lib"
    session = Session.ingest(
        images, gradients, CutConfig(criterion="volume", threshold=1.0),
        clock=counter_clock(), seed=0,
    )
    session.save(lib_dir)
    for name in ("session.json", "segments.fsrl", "features.fsaf"):
        assert (out / name).read_bytes() == (lib_dir / name).read_bytes()


# ---------------------------------------------------------------- features


def test_features_export_and_file_provider(tmp_path, capsys):
    sess = tmp_path / "sess"
    run_partition(tmp_path, sess)
    out = tmp_path / "f.fsaf"
    assert main(["features", "--session", str(sess), "--out", str(out)]) == 0
    table = read_features(out)
    session = Session.load(sess)
    assert sorted(table) == sorted(session.features)
    for key, values in table.items():
        assert np.array_equal(values, session.features[key])
    # file provider re-exports a given table verbatim
    out2 = tmp_path / "g.fsaf"
    assert main(["features", "--session", str(sess), "--out", str(out2),
                 "--provider", "file", "--source", str(out)]) == 0
    assert out2.read_bytes() == out.read_bytes()
    assert main(["features", "--session", str(sess), "--out", str(out2),
                 "--provider", "file"]) == 1


# ----------------------------------------------------------------- project


def test_project_matches_library(tmp_path):
    sess = tmp_path / "sess"
    run_partition(tmp_path, sess)
    feats = tmp_path / "f.fsaf"
    main(["features", "--session", str(sess), "--out", str(feats)])
    out = tmp_path / "layout.json"
    code = main(["project", "--features", str(feats), "--out", str(out),
                 "--k", "3", "--epochs", "20", "--seed", "7"])
    assert code == 0

    table = read_features(feats)
    keys = sorted(table)
    cfg = ProjectionConfig(k=3, min_dist=0.01, epochs=20, seed=7)
    lay = layout(fuzzy_knn(np.vstack([table[k] for k in keys]), 3), cfg)
    rows = json.loads(out.read_text())
    assert [r["key"] for r in rows] == [str(k) for k in keys]
    for row, (x, y) in zip(rows, lay.coords):
        assert row["x"] == float(x) and row["y"] == float(y)


def test_project_rejects_tiny_input(tmp_path, capsys):
    sess = tmp_path / "sess"
    run_partition(tmp_path, sess)
    feats = tmp_path / "f.fsaf"
    main(["features", "--session", str(sess), "--out", str(feats)])
    code = main(["project", "--features", str(feats),
                 "--out", str(tmp_path / "l.json")])  # default k=15 > 4 keys
    assert code == 1
    assert "k=15" in capsys.readouterr().err


# ------------------------------------------------------------------- train


def label_session_from_gt(sess):
    code = main(["oracle-eval", "--session", str(sess),
                 "--gt", str(Path(sess).parent / "gt"), "--apply"])
    assert code == 0


def test_train_writes_checkpoint_matching_library(tmp_path, capsys):
    sess = tmp_path / "sess"
    run_partition(tmp_path, sess)
    write_gt_dir(tmp_path, sess)
    label_session_from_gt(sess)
    frozen = tmp_path / "frozen"
    shutil.copytree(sess, frozen)

    out = tmp_path / "head.fsmh"
    code = main(["train", "--session", str(sess), "--out", str(out),
                 "--epochs", "2", "--triplets", "8", "--seed", "3"])
    assert code == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[-1].startswith("final_loss\t")

    lib = Session.load(frozen)
    cfg = TrainConfig(margin=0.05, momentum=0.8, weight_decay=5e-4,
                      epochs=2, triplets_per_epoch=8, learning_rate=0.1,
                      lr_decay=10.0, seed=3)
    lib.train(cfg)
    stored = lib.head.weight.astype(np.float32)  # checkpoints are f32
    assert np.array_equal(read_head(out), stored)
    # the session checkpoint sidecar was refreshed too
    assert np.array_equal(read_head(sess / "head.fsmh"), stored)


def test_train_without_labels_fails(tmp_path, capsys):
    sess = tmp_path / "sess"
    run_partition(tmp_path, sess)
    assert main(["train", "--session", str(sess)]) == 1
    assert "error" in capsys.readouterr().err


# ------------------------------------------------------------- evaluation


def test_oracle_eval_matches_library(tmp_path, capsys):
    sess = tmp_path / "sess"
    run_partition(tmp_path, sess)
    gt_dir = write_gt_dir(tmp_path, sess)
    capsys.readouterr()  # drop partition output
    code = main(["oracle-eval", "--session", str(sess), "--gt", str(gt_dir),
                 "--mode", "instance-iou"])
    assert code == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "image\tiou"

    session = Session.load(sess)
    expected = []
    for image_id in session.image_order:
        part = Partition.from_labels(session.region_map(image_id))
        majority = oracle_majority_labels(part, GT_STRIP.astype(np.int64))
        pred = majority[part.labels]
        expected.append(evaluate(pred, GT_STRIP.astype(np.int64), "instance-iou"))
    rows = dict(line.split("\t") for line in lines[1:])
    for image_id, score in zip(session.image_order, expected):
        assert float(rows[image_id]) == score
    summary = aggregate(expected)
    assert float(rows["mean"]) == summary["mean"]
    assert float(rows["median"]) == summary["median"]


def test_oracle_eval_missing_gt_fails(tmp_path, capsys):
    sess = tmp_path / "sess"
    run_partition(tmp_path, sess)
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["oracle-eval", "--session", str(sess), "--gt", str(empty)]) == 1


def test_oracle_eval_apply_then_export_masks(tmp_path, capsys):
    sess = tmp_path / "sess"
    run_partition(tmp_path, sess)
    write_gt_dir(tmp_path, sess)
    label_session_from_gt(sess)

    session = Session.load(sess)
    labels = sorted({s.label for s in session.segments.values()})
    assert labels == [1, 2]
    assert set(session.palette) == {1, 2}

    out = tmp_path / "masks"
    assert main(["export-masks", "--session", str(sess), "--out", str(out)]) == 0
    for image_id, expected in session.export_masks().items():
        png = np.asarray(Image.open(out / f"{image_id}.png"))
        assert np.array_equal(png, expected)
    meta = json.loads((out / "labels.json").read_text())
    assert meta["1"]["name"] == "class-1" and meta["2"]["color"]


def test_gt_constrain_matches_library(tmp_path, capsys):
    labels = tmp_path / "labels.png"
    gt = tmp_path / "gt.png"
    Image.fromarray(np.zeros((1, 5), dtype=np.uint8)).save(labels)
    Image.fromarray(GT_STRIP).save(gt)
    out = tmp_path / "constrained.png"
    assert main(["gt-constrain", "--labels", str(labels), "--gt", str(gt),
                 "--out", str(out)]) == 0
    assert capsys.readouterr().out.strip() == "regions\t2"
    part = gt_constrained_partition(
        Partition.from_labels(np.zeros((1, 5), dtype=np.int64)),
        GT_STRIP.astype(np.int64),
    )
    assert np.array_equal(np.asarray(Image.open(out)), part.labels)


def test_iou_prints_library_value(tmp_path, capsys):
    pred = tmp_path / "pred.png"
    gt = tmp_path / "gt.png"
    Image.fromarray(GT_STRIP).save(pred)
    Image.fromarray(GT_STRIP).save(gt)
    assert main(["iou", "--pred", str(pred), "--gt", str(gt),
                 "--mode", "agreement"]) == 0
    out = capsys.readouterr().out.strip()
    value = evaluate(GT_STRIP.astype(np.int64), GT_STRIP.astype(np.int64),
                     "agreement")
    assert out == f"agreement\t{value}"


# ------------------------------------------------------------ determinism


def run_pipeline(tmp_path, root):
    root.mkdir()
    sess = root / "sess"
    images, gradients = write_fixture(tmp_path)
    assert main(["partition", "--images", *images, "--gradients", *gradients,
                 "--out", str(sess), "--threshold", "1.0",
                 "--show-all", "--seed", "0"]) == 0
    gt_dir = write_gt_dir(tmp_path, sess)
    assert main(["features", "--session", str(sess),
                 "--out", str(root / "f.fsaf")]) == 0
    assert main(["project", "--features", str(root / "f.fsaf"),
                 "--out", str(root / "layout.json"),
                 "--k", "3", "--epochs", "20", "--seed", "0"]) == 0
    assert main(["oracle-eval", "--session", str(sess), "--gt", str(gt_dir),
                 "--apply"]) == 0
    assert main(["train", "--session", str(sess), "--epochs", "2",
                 "--triplets", "8", "--seed", "0"]) == 0
    assert main(["export-masks", "--session", str(sess),
                 "--out", str(root / "masks")]) == 0


def test_pipeline_runs_are_byte_identical(tmp_path, capsys):
    run_pipeline(tmp_path, tmp_path / "a")
    run_pipeline(tmp_path, tmp_path / "b")
    a_files = sorted(p for p in (tmp_path / "a").rglob("*") if p.is_file())
    b_files = sorted(p for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert [p.relative_to(tmp_path / "a") for p in a_files] == \
           [p.relative_to(tmp_path / "b") for p in b_files]
    for pa, pb in zip(a_files, b_files):
        assert pa.read_bytes() == pb.read_bytes(), pa.name
    # the logical clock keeps event times strictly increasing across steps
    manifest = json.loads((tmp_path / "a" / "sess" / "session.json").read_text())
    times = [e["t"] for e in manifest["events"]]
    assert times == sorted(times) and len(set(times)) == len(times)
