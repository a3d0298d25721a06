"""Annotation session state and the evaluation protocols.

A session owns images, their hierarchies and current partitions, the
segment registry with labels, the embedding head, and 2D coordinates.
Mutations (labeling, re-cuts, splits) funnel through this object; the
evaluation helpers at the bottom are pure functions over label masks.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from . import formats
from .correction import ClickSet, split_segment
from .features import BuiltinProvider, FileProvider, crop_segment, describe
from .graph import CutConfig, Partition, build_hierarchy, horizontal_cut, load_gradient
from .metric import EmbeddingHead, TrainConfig, embed, init_head, train_round
from .projection import (
    FuzzyGraph,
    Layout2D,
    ProjectionConfig,
    find_ab,
    fuzzy_knn,
    layout,
    transform_new,
)

MANIFEST = "session.json"
RUNS_FILE = "segments.fsrl"
FEATURES_FILE = "features.fsaf"
HEAD_FILE = "head.fsmh"
LAYOUT_FILE = "layout.json"


@dataclass
class Segment:
    key: int
    image_id: str
    runs: list
    pixel_count: int
    bbox: tuple  # rmin, cmin, rmax, cmax inclusive
    label: Optional[int] = None
    coords: Optional[tuple] = None


def _runs_bbox(runs, width: int) -> tuple:
    rmin, cmin = None, None
    rmax, cmax = 0, 0
    first = True
    for start, length in runs:
        for r in range(start // width, (start + length - 1) // width + 1):
            row_lo = max(start, r * width)
            row_hi = min(start + length - 1, r * width + width - 1)
            c_lo, c_hi = row_lo - r * width, row_hi - r * width
            if first:
                rmin, cmin, rmax, cmax = r, c_lo, r, c_hi
                first = False
            else:
                rmin = min(rmin, r)
                rmax = max(rmax, r)
                cmin = min(cmin, c_lo)
                cmax = max(cmax, c_hi)
    return (rmin, cmin, rmax, cmax)


class Session:
    def __init__(self, provider=None, clock=None, seed: int = 0,
                 proj_config: Optional[ProjectionConfig] = None):
        self.provider = provider if provider is not None else BuiltinProvider()
        self.clock = clock if clock is not None else time.time
        self.seed = int(seed)
        self.proj = proj_config if proj_config is not None else ProjectionConfig(seed=seed)
        self.images: dict[str, dict] = {}
        self.image_order: list[str] = []
        self.segments: dict[int, Segment] = {}
        self.by_image: dict[str, list[int]] = {}
        self.palette: dict[int, dict] = {}
        self.features: dict[int, np.ndarray] = {}
        self.head: Optional[EmbeddingHead] = None
        self.events: list[dict] = []
        self._gradients: dict[str, np.ndarray] = {}
        self._pixels: dict[str, np.ndarray] = {}
        self._hierarchies: dict = {}
        self._ab: Optional[tuple] = None

    # ------------------------------------------------------------------ setup

    @classmethod
    def ingest(cls, image_paths, gradient_paths, cut: CutConfig, provider=None,
               clock=None, seed: int = 0,
               proj_config: Optional[ProjectionConfig] = None) -> "Session":
        if len(image_paths) != len(gradient_paths):
            raise ValueError("image and gradient counts differ")
        s = cls(provider=provider, clock=clock, seed=seed, proj_config=proj_config)
        for img_path, grad_path in zip(image_paths, gradient_paths):
            image_id = Path(img_path).stem
            base, k = image_id, 1
            while image_id in s.images:
                k += 1
                image_id = f"{base}-{k}"
            grad = load_gradient(grad_path)
            pixels = s._load_pixels(img_path)
            if pixels.shape[:2] != grad.shape:
                raise ValueError(
                    f"{image_id}: image {pixels.shape[:2]} vs gradient {grad.shape}"
                )
            s.images[image_id] = {
                "path": str(img_path),
                "gradient": str(grad_path),
                "height": int(grad.shape[0]),
                "width": int(grad.shape[1]),
                "shown": False,
                "cut": cut,
            }
            s.image_order.append(image_id)
            s._gradients[image_id] = grad
            s._pixels[image_id] = pixels
            s._rebuild_image_segments(image_id, cut)
        s._log("ingest", images=list(s.image_order))
        return s

    @staticmethod
    def _load_pixels(path) -> np.ndarray:
        img = Image.open(path).convert("RGB")
        return np.asarray(img, dtype=np.float64) / 255.0

    def _gradient(self, image_id: str) -> np.ndarray:
        if image_id not in self._gradients:
            self._gradients[image_id] = load_gradient(self.images[image_id]["gradient"])
        return self._gradients[image_id]

    def _image_pixels(self, image_id: str) -> np.ndarray:
        if image_id not in self._pixels:
            self._pixels[image_id] = self._load_pixels(self.images[image_id]["path"])
        return self._pixels[image_id]

    def _hierarchy(self, image_id: str, criterion: str):
        key = (image_id, criterion)
        if key not in self._hierarchies:
            self._hierarchies[key] = build_hierarchy(self._gradient(image_id), criterion)
        return self._hierarchies[key]

    def _register_segment(self, image_id: str, runs) -> int:
        key = formats.segment_key(image_id, runs)
        width = self.images[image_id]["width"]
        seg = Segment(
            key=key,
            image_id=image_id,
            runs=[(int(a), int(b)) for a, b in runs],
            pixel_count=int(sum(n for _, n in runs)),
            bbox=_runs_bbox(runs, width),
        )
        self.segments[key] = seg
        mask = formats.runs_to_mask(seg.runs, self._shape(image_id))
        crop = crop_segment(
            self._image_pixels(image_id), mask, image_id=image_id, segment_key=key
        )
        self.features[key] = describe(crop, self.provider).values
        return key

    def _shape(self, image_id: str) -> tuple:
        info = self.images[image_id]
        return (info["height"], info["width"])

    def _rebuild_image_segments(self, image_id: str, cut: CutConfig) -> dict:
        """Recompute the partition; keep segments whose pixel sets survive."""
        h = self._hierarchy(image_id, cut.criterion)
        part = horizontal_cut(h, cut.threshold)
        new_runs = {}
        for r in range(part.n_regions):
            runs = formats.mask_to_runs(part.region_mask(r))
            new_runs[formats.segment_key(image_id, runs)] = runs
        old_keys = set(self.by_image.get(image_id, []))
        kept = sorted(old_keys & set(new_runs))
        added, removed = [], sorted(old_keys - set(new_runs))
        for key in removed:
            del self.segments[key]
            self.features.pop(key, None)
        for key, runs in new_runs.items():
            if key not in old_keys:
                self._register_segment(image_id, runs)
                added.append(key)
        order = sorted(new_runs, key=lambda k: new_runs[k][0][0])
        self.by_image[image_id] = order
        self.images[image_id]["cut"] = cut
        if self.images[image_id]["shown"] and added:
            self._place_new(sorted(added))
        return {"added": sorted(added), "removed": removed, "kept": kept}

    # ------------------------------------------------------------- projection

    def _embedded(self, keys) -> np.ndarray:
        if self.head is None:
            d_in = next(iter(self.features.values())).shape[0]
            self.head = init_head(d_in, seed=self.seed)
        mat = np.vstack([self.features[k] for k in keys])
        return embed(self.head, mat)

    def shown_keys(self) -> list[int]:
        out = []
        for image_id in self.image_order:
            if self.images[image_id]["shown"]:
                out.extend(self.by_image[image_id])
        return out

    def _curve(self) -> tuple:
        if self._ab is None:
            self._ab = find_ab(self.proj.min_dist)
        return self._ab

    def _layout_keys(self, keys) -> None:
        if not keys:
            return
        pts = self._embedded(keys)
        if len(keys) == 1:
            coords = np.zeros((1, 2))
        else:
            k_eff = min(self.proj.k, len(keys) - 1)
            labels = [self.segments[k].label for k in keys]
            graph = fuzzy_knn(pts, k_eff, labels=labels, lam=self.proj.lam)
            coords = layout(graph, self.proj).coords
        for key, (x, y) in zip(keys, coords):
            self.segments[key].coords = (float(x), float(y))

    def _place_new(self, new_keys) -> None:
        new_set = set(new_keys)
        old = [k for k in self.shown_keys()
               if k not in new_set and self.segments[k].coords is not None]
        if not old:
            self._layout_keys(self.shown_keys())
            return
        old_pts = self._embedded(old)
        n_old = len(old)
        if n_old > 2:
            graph_old = fuzzy_knn(old_pts, min(self.proj.k, n_old - 1))
        else:
            # placement only reads the reference points, not the edges
            graph_old = FuzzyGraph(
                points=old_pts, k=0,
                knn_idx=np.zeros((n_old, 0), dtype=int),
                knn_dist=np.zeros((n_old, 0)),
                rho=np.zeros(n_old), sigma=np.ones(n_old),
                edge_i=np.zeros(0, dtype=int), edge_j=np.zeros(0, dtype=int),
                edge_w=np.zeros(0),
            )
        a, b = self._curve()
        old_layout = Layout2D(
            coords=np.array([self.segments[k].coords for k in old], dtype=np.float64),
            a=a, b=b,
        )
        coords = transform_new(self._embedded(new_keys), graph_old, old_layout, self.proj)
        for key, (x, y) in zip(new_keys, coords):
            self.segments[key].coords = (float(x), float(y))

    def next_batch(self, n: int) -> list[int]:
        pending = [i for i in self.image_order if not self.images[i]["shown"]]
        batch = pending[: max(0, int(n))]
        if not batch:
            return []
        keys = []
        for image_id in batch:
            self.images[image_id]["shown"] = True
            keys.extend(self.by_image[image_id])
        self._place_new(keys)
        self._log("batch", images=batch, segments=len(keys))
        return keys

    def relayout(self) -> None:
        self._layout_keys(self.shown_keys())
        self._log("relayout", segments=len(self.shown_keys()))

    # ---------------------------------------------------------------- labels

    def add_label(self, name: str, color) -> int:
        label_id = max(self.palette, default=0) + 1
        self.palette[label_id] = {"name": str(name), "color": [int(c) for c in color]}
        self._log("add_label", label=label_id, name=str(name))
        return label_id

    def assign_label_box(self, rect, label_id: int) -> int:
        if label_id not in self.palette:
            raise ValueError(f"label {label_id} not in palette")
        x0, y0, x1, y1 = (float(v) for v in rect)
        x0, x1 = min(x0, x1), max(x0, x1)
        y0, y1 = min(y0, y1), max(y0, y1)
        count = 0
        for key in self.shown_keys():
            seg = self.segments[key]
            if seg.coords is None:
                continue
            x, y = seg.coords
            if x0 <= x <= x1 and y0 <= y <= y1:
                seg.label = label_id
                count += 1
        self._log("label_box", rect=[x0, y0, x1, y1], label=label_id, count=count)
        return count

    # ------------------------------------------------------------- mutations

    def recut(self, image_id: str, cut: CutConfig) -> dict:
        if image_id not in self.images:
            raise ValueError(f"unknown image {image_id!r}")
        report = self._rebuild_image_segments(image_id, cut)
        self._log(
            "recut", image=image_id, criterion=cut.criterion,
            threshold=float(cut.threshold),
            added=len(report["added"]), removed=len(report["removed"]),
        )
        return report

    def apply_split(self, key: int, clicks: ClickSet) -> tuple[int, int]:
        if key not in self.segments:
            raise KeyError(f"unknown segment {key}")
        if not clicks.positive or not clicks.negative:
            raise ValueError("split needs both positive and negative clicks")
        seg = self.segments[key]
        image_id = seg.image_id
        mask = formats.runs_to_mask(seg.runs, self._shape(image_id))
        pos_mask = split_segment(self._gradient(image_id), mask, clicks)
        neg_mask = mask & ~pos_mask

        del self.segments[key]
        self.features.pop(key, None)
        order = [k for k in self.by_image[image_id] if k != key]
        children = []
        for child_mask in (pos_mask, neg_mask):
            runs = formats.mask_to_runs(child_mask)
            children.append(self._register_segment(image_id, runs))
        order.extend(children)
        self.by_image[image_id] = sorted(
            order, key=lambda k: self.segments[k].runs[0][0]
        )
        if self.images[image_id]["shown"]:
            self._place_new(sorted(children))
        self._log("split", segment=str(key),
                  children=[str(c) for c in children])
        return (children[0], children[1])

    # --------------------------------------------------------------- outputs

    def export_masks(self) -> dict[str, np.ndarray]:
        out = {}
        for image_id in self.image_order:
            mask = np.zeros(self._shape(image_id), dtype=np.int32)
            flat = mask.ravel()
            for key in self.by_image[image_id]:
                seg = self.segments[key]
                if seg.label is None:
                    continue
                for start, length in seg.runs:
                    flat[start : start + length] = seg.label
            out[image_id] = mask
        return out

    def region_map(self, image_id: str) -> np.ndarray:
        """Index of each pixel's segment within the image's canonical order."""
        idx = np.full(self._shape(image_id), -1, dtype=np.int32)
        flat = idx.ravel()
        for i, key in enumerate(self.by_image[image_id]):
            for start, length in self.segments[key].runs:
                flat[start : start + length] = i
        return idx

    def train(self, cfg: TrainConfig = TrainConfig(), on_epoch=None) -> list[float]:
        keys = sorted(k for k, seg in self.segments.items() if self.features.get(k) is not None)
        feats = np.vstack([self.features[k] for k in keys])
        labels = [self.segments[k].label for k in keys]
        if self.head is None:
            self.head = init_head(feats.shape[1], seed=self.seed)
        self.head, trace = train_round(feats, labels, self.head, cfg, on_epoch=on_epoch)
        self._log("train", epochs=cfg.epochs, final_loss=float(trace[-1]))
        return trace

    # ------------------------------------------------------------ event log

    def _log(self, action: str, **payload) -> None:
        self.events.append({"t": self.clock(), "action": action, **payload})

    # ----------------------------------------------------------- persistence

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {
            "version": 1,
            "seed": self.seed,
            "projection": {
                "k": self.proj.k,
                "min_dist": self.proj.min_dist,
                "lam": self.proj.lam,
                "epochs": self.proj.epochs,
                "negative_sample_rate": self.proj.negative_sample_rate,
                "seed": self.proj.seed,
            },
            "provider": self._provider_spec(),
            "images": [
                {
                    "id": image_id,
                    "path": self.images[image_id]["path"],
                    "gradient": self.images[image_id]["gradient"],
                    "height": self.images[image_id]["height"],
                    "width": self.images[image_id]["width"],
                    "shown": self.images[image_id]["shown"],
                    "cut": {
                        "criterion": self.images[image_id]["cut"].criterion,
                        "threshold": self.images[image_id]["cut"].threshold,
                    },
                    "segments": [str(k) for k in self.by_image[image_id]],
                }
                for image_id in self.image_order
            ],
            "palette": {str(i): v for i, v in sorted(self.palette.items())},
            "labels": {
                str(k): seg.label
                for k, seg in sorted(self.segments.items())
                if seg.label is not None
            },
            "events": self.events,
        }
        with open(directory / MANIFEST, "w") as f:
            json.dump(manifest, f, sort_keys=True, indent=2)
            f.write("\n")
        formats.write_runs(
            directory / RUNS_FILE, {k: seg.runs for k, seg in self.segments.items()}
        )
        formats.write_features(directory / FEATURES_FILE, self.features)
        if self.head is not None:
            formats.write_head(directory / HEAD_FILE, self.head.weight)
        coords = [
            {"key": str(k), "x": seg.coords[0], "y": seg.coords[1]}
            for k, seg in sorted(self.segments.items())
            if seg.coords is not None
        ]
        with open(directory / LAYOUT_FILE, "w") as f:
            json.dump(coords, f, sort_keys=True, indent=2)
            f.write("\n")

    def _provider_spec(self) -> dict:
        if isinstance(self.provider, FileProvider):
            return {"kind": "file"}
        return {"kind": "builtin"}

    @classmethod
    def load(cls, directory, provider=None, clock=None) -> "Session":
        directory = Path(directory)
        with open(directory / MANIFEST) as f:
            manifest = json.load(f)
        proj = ProjectionConfig(**manifest["projection"])
        s = cls(provider=provider, clock=clock, seed=manifest["seed"], proj_config=proj)
        runs_by_key = formats.read_runs(directory / RUNS_FILE)
        s.features = formats.read_features(directory / FEATURES_FILE)
        if (directory / HEAD_FILE).exists():
            s.head = EmbeddingHead(weight=formats.read_head(directory / HEAD_FILE))
        coords = {}
        if (directory / LAYOUT_FILE).exists():
            with open(directory / LAYOUT_FILE) as f:
                for row in json.load(f):
                    coords[int(row["key"])] = (row["x"], row["y"])
        labels = {int(k): v for k, v in manifest["labels"].items()}
        for entry in manifest["images"]:
            image_id = entry["id"]
            s.images[image_id] = {
                "path": entry["path"],
                "gradient": entry["gradient"],
                "height": entry["height"],
                "width": entry["width"],
                "shown": entry["shown"],
                "cut": CutConfig(
                    criterion=entry["cut"]["criterion"],
                    threshold=entry["cut"]["threshold"],
                ),
            }
            s.image_order.append(image_id)
            order = [int(k) for k in entry["segments"]]
            s.by_image[image_id] = order
            for key in order:
                runs = runs_by_key[key]
                s.segments[key] = Segment(
                    key=key,
                    image_id=image_id,
                    runs=runs,
                    pixel_count=int(sum(n for _, n in runs)),
                    bbox=_runs_bbox(runs, entry["width"]),
                    label=labels.get(key),
                    coords=coords.get(key),
                )
        s.palette = {
            int(i): {"name": v["name"], "color": list(v["color"])}
            for i, v in manifest["palette"].items()
        }
        s.events = manifest["events"]
        return s


# ------------------------------------------------------------- evaluation


def gt_constrained_partition(partition: Partition, gt: np.ndarray) -> Partition:
    """Intersect every region with the ground-truth classes.

    Output regions are the 4-connected components of (region, gt class)
    intersections, so each is single-class by construction.
    """
    gt = np.asarray(gt)
    if gt.shape != partition.labels.shape:
        raise ValueError("gt dimensions do not match partition")
    h, w = gt.shape
    combined = partition.labels.astype(np.int64) * (int(gt.max()) + 1) + gt
    parent = np.arange(h * w)

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    flat = combined.ravel()
    for r in range(h):
        for c in range(w):
            p = r * w + c
            if c + 1 < w and flat[p] == flat[p + 1]:
                parent[find(p)] = find(p + 1)
            if r + 1 < h and flat[p] == flat[p + w]:
                parent[find(p)] = find(p + w)
    ids = {}
    labels = np.zeros(h * w, dtype=np.int64)
    for p in range(h * w):
        root = find(p)
        if root not in ids:
            ids[root] = len(ids)
        labels[p] = ids[root]
    return Partition.from_labels(labels.reshape(h, w))


def oracle_majority_labels(partition: Partition, gt: np.ndarray) -> np.ndarray:
    """Per-region majority ground-truth label; ties take the smallest id."""
    gt = np.asarray(gt)
    if gt.shape != partition.labels.shape:
        raise ValueError("gt dimensions do not match partition")
    out = np.zeros(partition.n_regions, dtype=np.int64)
    for r in range(partition.n_regions):
        values, counts = np.unique(gt[partition.labels == r], return_counts=True)
        out[r] = int(values[np.argmax(counts)])  # np.unique sorts, argmax takes first max
    return out


def evaluate(pred: np.ndarray, gt: np.ndarray, mode: str) -> float:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError("pred and gt dimensions differ")
    if mode == "binary-iou":
        p, g = pred > 0, gt > 0
        union = (p | g).sum()
        return float((p & g).sum() / union) if union else 1.0
    if mode == "agreement":
        valid = gt > 0
        return float((pred[valid] == gt[valid]).mean()) if valid.any() else 1.0
    if mode == "instance-iou":
        scores = []
        for inst in np.unique(gt[gt > 0]):
            inst_mask = gt == inst
            overlaps = {}
            for lab in np.unique(pred[inst_mask & (pred > 0)]):
                overlaps[int(lab)] = int((inst_mask & (pred == lab)).sum())
            if not overlaps:
                scores.append(0.0)
                continue
            best = max(sorted(overlaps), key=lambda lab: overlaps[lab])
            pred_mask = pred == best
            scores.append(float((inst_mask & pred_mask).sum() / (inst_mask | pred_mask).sum()))
        return float(np.mean(scores)) if scores else 1.0
    raise ValueError(f"unknown mode {mode!r}")


def aggregate(values) -> dict:
    values = [float(v) for v in values]
    return {"mean": float(np.mean(values)), "median": float(np.median(values))}
