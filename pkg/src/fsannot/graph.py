"""Edge-weighted pixel graphs and attribute-driven watershed hierarchies.

An image of shape (h, w) induces an implicit 4-adjacency graph whose edge
weights average the two endpoint gradient strengths.  Edges are enumerated
deterministically: pixels in row-major order, and for each pixel its
horizontal (rightward) edge before its vertical (downward) edge.

The binary partition tree is built by Kruskal's algorithm over edges sorted
by (weight, edge index).  After quasi-flat-zone canonicalization, regional
minima are the canonical internal nodes whose children are all leaves; each
MST edge then receives the attribute-extinction value of the minimum it
extinguishes, and partitions come from thresholding those saliencies.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import DegenerateInputError
from .formats import read_gradient_raw

CRITERIA = ("area", "volume", "dynamics")


@dataclass(frozen=True)
class CutConfig:
    criterion: str = "volume"
    threshold: float = 1000.0

    def __post_init__(self):
        if self.criterion not in CRITERIA:
            raise ValueError(f"unknown criterion {self.criterion!r}")
        if not np.isfinite(self.threshold) or self.threshold <= 0:
            raise ValueError("threshold must be finite and > 0")


def load_gradient(path) -> np.ndarray:
    """Read a gradient image (8/16-bit single-channel PNG or FSGR raw float).

    Values are min-max normalized to [0, 1] per image; a constant image
    normalizes to all zeros.
    """
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == b"FSGR":
        values = read_gradient_raw(path)
    else:
        img = Image.open(path)
        if img.mode not in ("L", "I", "I;16", "F"):
            img = img.convert("L")
        values = np.asarray(img, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"{path}: gradient PNG must be single-channel")
    if not np.isfinite(values).all():
        raise ValueError(f"{path}: gradient contains non-finite values")
    lo, hi = values.min(), values.max()
    if hi > lo:
        values = (values - lo) / (hi - lo)
    else:
        values = np.zeros_like(values)
    return values


def grid_edges(height: int, width: int):
    """Enumerate the 4-adjacency edges of an (height, width) grid.

    Returns (u, v, slot_order) flat-index arrays in the deterministic edge
    order: row-major per pixel, horizontal before vertical.
    """
    idx = np.arange(height * width).reshape(height, width)
    # slot 2*p for the rightward edge of pixel p, 2*p + 1 for the downward one
    hu = idx[:, :-1].ravel()
    hv = idx[:, 1:].ravel()
    vu = idx[:-1, :].ravel()
    vv = idx[1:, :].ravel()
    u = np.concatenate([hu, vu])
    v = np.concatenate([hv, vv])
    slots = np.concatenate([2 * hu, 2 * vu + 1])
    order = np.argsort(slots, kind="stable")
    return u[order], v[order]


def edge_weight(grad: np.ndarray, p: tuple[int, int], q: tuple[int, int]) -> float:
    """Weight of the edge between 4-neighbors p and q: (G(p) + G(q)) / 2."""
    h, w = grad.shape
    for r, c in (p, q):
        if not (0 <= r < h and 0 <= c < w):
            raise ValueError(f"pixel {(r, c)} outside {h}x{w} image")
    if abs(p[0] - q[0]) + abs(p[1] - q[1]) != 1:
        raise ValueError(f"pixels {p} and {q} are not 4-neighbors")
    return (float(grad[p]) + float(grad[q])) / 2.0


def edge_weights(grad: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    flat = grad.ravel()
    return (flat[u] + flat[v]) / 2.0


@dataclass
class Hierarchy:
    """Canonicalized binary partition tree with extinction saliencies.

    Nodes 0..n-1 are pixel leaves; nodes n..2n-2 are merges in creation
    order, so a parent index always exceeds its children's.  ``saliency``
    is aligned with ``mst_u``/``mst_v`` (one entry per MST edge).
    """

    shape: tuple[int, int]
    criterion: str
    parent: np.ndarray          # (2n-1,), root points to itself
    altitude: np.ndarray        # (2n-1,), zero for leaves
    left: np.ndarray            # (n-1,), first child of internal node n+i
    right: np.ndarray           # (n-1,), second child
    canon: np.ndarray           # (2n-1,) quasi-flat-zone canonical node
    is_minimum: np.ndarray      # (2n-1,) bool, true for canonical minima nodes
    mst_u: np.ndarray           # (n-1,) flat pixel endpoints of merge edges
    mst_v: np.ndarray
    saliency: np.ndarray        # (n-1,) extinction value per MST edge

    @property
    def n_leaves(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def n_nodes(self) -> int:
        return 2 * self.n_leaves - 1

    @property
    def root(self) -> int:
        return self.n_nodes - 1

    def children(self, node: int) -> tuple[int, int]:
        i = node - self.n_leaves
        return int(self.left[i]), int(self.right[i])


@dataclass
class Partition:
    """Disjoint 4-connected regions covering the image."""

    labels: np.ndarray          # (h, w) region id per pixel, 0..n_regions-1
    n_regions: int
    region_sizes: np.ndarray
    region_bboxes: np.ndarray   # (n_regions, 4): rmin, cmin, rmax, cmax inclusive

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> "Partition":
        labels = np.asarray(labels)
        n = int(labels.max()) + 1 if labels.size else 0
        sizes = np.bincount(labels.ravel(), minlength=n)
        bboxes = np.zeros((n, 4), dtype=np.int64)
        rows, cols = np.indices(labels.shape)
        for r in range(n):
            m = labels == r
            bboxes[r] = (rows[m].min(), cols[m].min(), rows[m].max(), cols[m].max())
        return cls(labels=labels, n_regions=n, region_sizes=sizes, region_bboxes=bboxes)

    def region_mask(self, region: int) -> np.ndarray:
        return self.labels == region


class _UnionFind:
    __slots__ = ("parent",)

    def __init__(self, n: int):
        self.parent = np.arange(n, dtype=np.int64)

    def find(self, x: int) -> int:
        p = self.parent
        root = x
        while p[root] != root:
            root = p[root]
        while p[x] != root:
            p[x], x = root, p[x]
        return root

    def union(self, a: int, b: int) -> None:
        self.parent[self.find(a)] = self.find(b)


def _validate_gradient(grad: np.ndarray) -> np.ndarray:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.ndim != 2:
        raise ValueError("gradient must be a 2D array")
    if not np.isfinite(grad).all():
        raise ValueError("gradient contains non-finite values")
    if grad.size and (grad.min() < 0 or grad.max() > 1):
        raise ValueError("gradient values must lie in [0, 1]")
    return grad


def build_hierarchy(grad: np.ndarray, criterion: str = "volume") -> Hierarchy:
    """Build the watershed hierarchy of a gradient image.

    Kruskal merges in (weight, edge index) order define the binary
    partition tree; quasi-flat-zone canonicalization collapses equal-
    altitude parent/child pairs; minima are canonical internal nodes with
    all-leaf children.  During the ascent each component carries its
    surviving minimum (largest attribute per ``criterion``, ties to the
    earlier-formed minimum); a merge edge's saliency is the attribute of
    the extinguished side, or 0 when a side carries no minimum.
    """
    if criterion not in CRITERIA:
        raise ValueError(f"unknown criterion {criterion!r}")
    grad = _validate_gradient(grad)
    h, w = grad.shape
    n = h * w
    if n < 2:
        raise DegenerateInputError("hierarchy needs at least 2 pixels")

    eu, ev = grid_edges(h, w)
    weights = edge_weights(grad, eu, ev)
    order = np.lexsort((np.arange(len(eu)), weights))

    n_nodes = 2 * n - 1
    parent = np.arange(n_nodes, dtype=np.int64)
    altitude = np.zeros(n_nodes, dtype=np.float64)
    left = np.zeros(n - 1, dtype=np.int64)
    right = np.zeros(n - 1, dtype=np.int64)
    mst_u = np.zeros(n - 1, dtype=np.int64)
    mst_v = np.zeros(n - 1, dtype=np.int64)

    uf = _UnionFind(n)
    comp_node = np.arange(n, dtype=np.int64)  # component root -> top BPT node
    nxt = n
    for e in order:
        ra, rb = uf.find(int(eu[e])), uf.find(int(ev[e]))
        if ra == rb:
            continue
        i = nxt - n
        left[i], right[i] = comp_node[ra], comp_node[rb]
        parent[comp_node[ra]] = nxt
        parent[comp_node[rb]] = nxt
        altitude[nxt] = weights[e]
        mst_u[i], mst_v[i] = eu[e], ev[e]
        uf.union(ra, rb)
        comp_node[uf.find(ra)] = nxt
        nxt += 1
    assert nxt == n_nodes, "4-adjacency grid must be connected"

    # quasi-flat-zone canonicalization: a node whose parent has the same
    # altitude maps to that parent's canonical node
    canon = np.arange(n_nodes, dtype=np.int64)
    for u in range(n_nodes - 2, n - 1, -1):
        if altitude[parent[u]] == altitude[u]:
            canon[u] = canon[parent[u]]

    # minima: canonical internal nodes whose quasi-flat-zone children are
    # all leaves; singleton leaves are never minima
    is_min = np.zeros(n_nodes, dtype=bool)
    is_min[n:] = canon[n:] == np.arange(n, n_nodes)
    for u in range(n, n_nodes):
        cu = canon[u]
        for c in (left[u - n], right[u - n]):
            if c >= n and canon[c] != cu:
                is_min[cu] = False
    # creation order of each minimum: its earliest constituent merge
    min_order = np.full(n_nodes, np.iinfo(np.int64).max, dtype=np.int64)
    for u in range(n, n_nodes):
        cu = canon[u]
        if is_min[cu]:
            min_order[cu] = min(min_order[cu], u)

    saliency = _extinction_saliency(
        criterion, n, altitude, left, right, canon, is_min, min_order
    )

    return Hierarchy(
        shape=(h, w),
        criterion=criterion,
        parent=parent,
        altitude=altitude,
        left=left,
        right=right,
        canon=canon,
        is_minimum=is_min,
        mst_u=mst_u,
        mst_v=mst_v,
        saliency=saliency,
    )


def _extinction_saliency(criterion, n, altitude, left, right, canon, is_min, min_order):
    n_nodes = 2 * n - 1
    area = np.ones(n_nodes, dtype=np.float64)
    carried = np.full(n_nodes, -1, dtype=np.int64)
    saliency = np.zeros(n - 1, dtype=np.float64)

    def attr_at(c: int, t: float) -> float:
        # component attribute at merge altitude t; with leaves at altitude 0
        # the recursive volume telescopes to area * t, and the subtree's
        # minimum altitude is always 0, so dynamics reduces to t
        if criterion == "area":
            return area[c]
        if criterion == "volume":
            return area[c] * t
        return t

    for u in range(n, n_nodes):
        i = u - n
        a, b = int(left[i]), int(right[i])
        t = altitude[u]
        attr_a, attr_b = attr_at(a, t), attr_at(b, t)
        area[u] = area[a] + area[b]
        if is_min[canon[u]]:
            carried[u] = canon[u]
            continue
        ma, mb = carried[a], carried[b]
        if ma < 0 and mb < 0:
            continue
        if ma < 0:
            carried[u] = mb
            continue
        if mb < 0:
            carried[u] = ma
            continue
        a_wins = attr_a > attr_b or (attr_a == attr_b and min_order[ma] < min_order[mb])
        if a_wins:
            carried[u] = ma
            saliency[i] = attr_b
        else:
            carried[u] = mb
            saliency[i] = attr_a
    return saliency


def attributes(h: Hierarchy, kind: str) -> np.ndarray:
    """Per-node attribute values over all 2n-1 nodes.

    area(n): leaf count of the subtree.  volume(n): children volumes plus
    area(n) * (parent altitude - own altitude), leaves at altitude 0, the
    root using its own altitude as parent altitude.  dynamics(n): parent
    altitude minus the minimum altitude within the subtree.
    """
    if kind not in CRITERIA:
        raise ValueError(f"unknown attribute kind {kind!r}")
    n = h.n_leaves
    n_nodes = h.n_nodes
    if kind == "area":
        area = np.ones(n_nodes, dtype=np.float64)
        for u in range(n, n_nodes):
            a, b = h.children(u)
            area[u] = area[a] + area[b]
        return area
    parent_alt = h.altitude[h.parent]
    parent_alt[h.root] = h.altitude[h.root]
    if kind == "dynamics":
        # every subtree reaches down to a leaf at altitude 0
        return parent_alt - 0.0
    area = attributes(h, "area")
    vol_upto = np.zeros(n_nodes, dtype=np.float64)
    for u in range(n, n_nodes):
        a, b = h.children(u)
        t = h.altitude[u]
        vol_upto[u] = (vol_upto[a] + area[a] * (t - h.altitude[a])) + (
            vol_upto[b] + area[b] * (t - h.altitude[b])
        )
    return vol_upto + area * (parent_alt - h.altitude)


def horizontal_cut(h: Hierarchy, threshold: float) -> Partition:
    """Partition into connected components of MST edges with saliency < threshold.

    Region ids follow first-pixel row-major order.
    """
    if not threshold > 0:
        raise ValueError("threshold must be > 0")
    n = h.n_leaves
    uf = _UnionFind(n)
    keep = h.saliency < threshold
    for u, v in zip(h.mst_u[keep], h.mst_v[keep]):
        uf.union(int(u), int(v))
    labels = np.full(n, -1, dtype=np.int64)
    next_id = 0
    for p in range(n):
        r = uf.find(p)
        if labels[r] < 0:
            labels[r] = next_id
            next_id += 1
        labels[p] = labels[r]
    return Partition.from_labels(labels.reshape(h.shape))
