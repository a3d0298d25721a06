"""Command line entry points for the batch pipeline.

Each subcommand is a thin composition of library calls so that a shell
run and a direct library call produce identical bytes. Sessions touched
here advance a logical counter clock instead of wall time, keeping
repeated runs reproducible.
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .features import FileProvider
from .formats import read_features, read_head, write_features, write_head
from .graph import CutConfig, Partition
from .metric import TrainConfig, embed
from .projection import ProjectionConfig, fuzzy_knn, layout
from .server import serve
from .session import (
    Session,
    aggregate,
    evaluate,
    gt_constrained_partition,
    oracle_majority_labels,
)

LABEL_COLORS = [
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
]


def _counter_clock(start: int = 0):
    counter = itertools.count(start)
    return lambda: next(counter)


def _load_session(directory) -> Session:
    session = Session.load(directory)
    last = max((int(e["t"]) for e in session.events), default=-1)
    session.clock = _counter_clock(last + 1)
    return session


def _read_label_image(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.int64)


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 1


# ------------------------------------------------------------- subcommands


def cmd_partition(args) -> int:
    if len(args.images) != len(args.gradients):
        return _fail("need one gradient per image")
    cut = CutConfig(criterion=args.criterion, threshold=args.threshold)
    session = Session.ingest(
        args.images, args.gradients, cut,
        clock=_counter_clock(), seed=args.seed,
    )
    if args.show_all:
        session.next_batch(len(session.image_order))
    session.save(args.out)
    for image_id in session.image_order:
        print(f"{image_id}\t{len(session.by_image[image_id])}")
    return 0


def cmd_features(args) -> int:
    session = _load_session(args.session)
    if args.provider == "file":
        if not args.source:
            return _fail("--provider file needs --source")
        table = read_features(args.source)
        try:
            feats = {key: table[key] for key in session.segments}
        except KeyError as err:
            return _fail(f"feature file is missing segment {err}")
    else:
        feats = {key: session.features[key] for key in session.segments}
    write_features(args.out, feats)
    print(f"segments\t{len(feats)}")
    return 0


def cmd_project(args) -> int:
    table = read_features(args.features)
    keys = sorted(table)
    cfg = ProjectionConfig(k=args.k, min_dist=args.min_dist,
                           epochs=args.epochs, seed=args.seed)
    if len(keys) <= cfg.k:
        return _fail(f"{len(keys)} segments cannot support k={cfg.k}")
    points = np.vstack([table[k] for k in keys])
    if args.head:
        points = embed(read_head(args.head), points)
    lay = layout(fuzzy_knn(points, cfg.k), cfg)
    rows = [
        {"key": str(k), "x": float(x), "y": float(y)}
        for k, (x, y) in zip(keys, lay.coords)
    ]
    text = json.dumps(rows, indent=2, sort_keys=True) + "\n"
    Path(args.out).write_text(text)
    return 0


def cmd_train(args) -> int:
    session = _load_session(args.session)
    cfg = TrainConfig(
        margin=args.margin, momentum=args.momentum,
        weight_decay=args.weight_decay, epochs=args.epochs,
        triplets_per_epoch=args.triplets, learning_rate=args.lr,
        lr_decay=args.lr_decay, seed=args.seed,
    )
    try:
        trace = session.train(cfg)
    except ValueError as err:
        return _fail(str(err))
    session.save(args.session)
    if args.out:
        write_head(args.out, session.head.weight)
    print(f"first_loss\t{trace[0]}")
    print(f"final_loss\t{trace[-1]}")
    return 0


def _majority_per_image(session: Session, image_id: str, gt: np.ndarray):
    part = Partition.from_labels(session.region_map(image_id))
    majority = oracle_majority_labels(part, gt)
    return part, majority


def cmd_oracle_eval(args) -> int:
    session = _load_session(args.session)
    gt_root = Path(args.gt)
    scores = []
    print("image\tiou")
    for image_id in session.image_order:
        gt_path = gt_root / f"{image_id}.png"
        if not gt_path.exists():
            return _fail(f"no ground truth for {image_id}")
        gt = _read_label_image(gt_path)
        part, majority = _majority_per_image(session, image_id, gt)
        pred = majority[part.labels]
        score = evaluate(pred, gt, args.mode)
        scores.append(score)
        print(f"{image_id}\t{score}")
        if args.apply:
            _apply_labels(session, image_id, majority)
    summary = aggregate(scores)
    print(f"mean\t{summary['mean']}")
    print(f"median\t{summary['median']}")
    if args.apply:
        session.save(args.session)
    return 0


def _apply_labels(session: Session, image_id: str, majority: np.ndarray) -> None:
    for value in np.unique(majority):
        value = int(value)
        if value <= 0 or value in session.palette:
            continue
        color = LABEL_COLORS[(value - 1) % len(LABEL_COLORS)]
        session.palette[value] = {"name": f"class-{value}", "color": list(color)}
    for region, key in enumerate(session.by_image[image_id]):
        value = int(majority[region])
        session.segments[key].label = value if value > 0 else None


def cmd_gt_constrain(args) -> int:
    labels = _read_label_image(args.labels)
    gt = _read_label_image(args.gt)
    if labels.shape != gt.shape:
        return _fail("label image and ground truth shapes differ")
    part = gt_constrained_partition(Partition.from_labels(labels), gt)
    if part.n_regions > 65535:
        return _fail("too many regions for a 16-bit label image")
    Image.fromarray(part.labels.astype(np.uint16)).save(args.out)
    print(f"regions\t{part.n_regions}")
    return 0


def cmd_iou(args) -> int:
    pred = _read_label_image(args.pred)
    gt = _read_label_image(args.gt)
    if pred.shape != gt.shape:
        return _fail("prediction and ground truth shapes differ")
    print(f"{args.mode}\t{evaluate(pred, gt, args.mode)}")
    return 0


def cmd_export_masks(args) -> int:
    session = _load_session(args.session)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    flat_palette = [0] * 768
    for label, entry in session.palette.items():
        if not 0 <= label <= 255:
            return _fail(f"label {label} does not fit an indexed png")
        flat_palette[3 * label : 3 * label + 3] = entry["color"]
    for image_id, mask in session.export_masks().items():
        if mask.max() > 255:
            return _fail(f"{image_id}: labels do not fit an indexed png")
        img = Image.fromarray(mask.astype(np.uint8), mode="P")
        img.putpalette(flat_palette)
        img.save(out / f"{image_id}.png")
        print(f"{image_id}\t{out / f'{image_id}.png'}")
    meta = {
        str(label): entry for label, entry in sorted(session.palette.items())
    }
    (out / "labels.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n"
    )
    return 0


def cmd_serve(args) -> int:
    session = _load_session(args.session)
    serve(session, port=args.port, directory=args.session, host=args.host)
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fsannot",
        description="Watershed partitioning, feature projection, and "
                    "bulk-annotation utilities.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partition", help="partition images into a session")
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--gradients", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--criterion", default="volume",
                   choices=("area", "volume", "dynamics"))
    p.add_argument("--threshold", type=float, default=1000.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--show-all", action="store_true",
                   help="place every segment on the canvas")
    p.set_defaults(run=cmd_partition)

    p = sub.add_parser("features", help="export segment descriptors")
    p.add_argument("--session", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--provider", default="builtin", choices=("builtin", "file"))
    p.add_argument("--source", help="feature file for --provider file")
    p.set_defaults(run=cmd_features)

    p = sub.add_parser("project", help="lay out features in 2-d")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--head", help="optional metric head checkpoint")
    p.add_argument("--k", type=int, default=15)
    p.add_argument("--min-dist", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(run=cmd_project)

    p = sub.add_parser("train", help="fit the metric head on session labels")
    p.add_argument("--session", required=True)
    p.add_argument("--out", help="also write the head checkpoint here")
    p.add_argument("--margin", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.8)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--triplets", type=int, default=1000)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--lr-decay", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(run=cmd_train)

    p = sub.add_parser("oracle-eval",
                       help="score the partition under majority-vote labels")
    p.add_argument("--session", required=True)
    p.add_argument("--gt", required=True, help="directory of <image>.png masks")
    p.add_argument("--mode", default="instance-iou",
                   choices=("binary-iou", "instance-iou", "agreement"))
    p.add_argument("--apply", action="store_true",
                   help="write the majority labels back into the session")
    p.set_defaults(run=cmd_oracle_eval)

    p = sub.add_parser("gt-constrain",
                       help="intersect a partition with ground-truth classes")
    p.add_argument("--labels", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(run=cmd_gt_constrain)

    p = sub.add_parser("iou", help="score one mask against another")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mode", default="binary-iou",
                   choices=("binary-iou", "instance-iou", "agreement"))
    p.set_defaults(run=cmd_iou)

    p = sub.add_parser("export-masks", help="write labeled masks as indexed png")
    p.add_argument("--session", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(run=cmd_export_masks)

    p = sub.add_parser("serve", help="run the annotation service")
    p.add_argument("--session", required=True)
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.set_defaults(run=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.run(args)
    except (OSError, ValueError) as err:
        return _fail(str(err))


if __name__ == "__main__":
    raise SystemExit(main())
