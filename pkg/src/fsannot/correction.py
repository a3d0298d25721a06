"""Seeded splitting of under-segmented regions.

Positive and negative clicks compete for the segment's pixels through an
image foresting transform with the watershed path cost: a pixel joins the
seed it can reach along the path whose maximum edge weight is smallest.
Edges are restricted to the segment and weighted like the partition graph.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ClickSet:
    positive: tuple = field(default_factory=tuple)
    negative: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "positive", tuple((int(r), int(c)) for r, c in self.positive))
        object.__setattr__(self, "negative", tuple((int(r), int(c)) for r, c in self.negative))
        overlap = set(self.positive) & set(self.negative)
        if overlap:
            raise ValueError(f"seeds {sorted(overlap)} are both positive and negative")


def split_segment(grad: np.ndarray, segment: np.ndarray, clicks: ClickSet) -> np.ndarray:
    """Label the segment's pixels positive/negative from the click seeds.

    Returns a boolean mask over the image, true where a pixel belongs to
    the positive side; pixels outside the segment are always false.
    Processing is a priority queue ordered by path cost with FIFO ties;
    seeds start at cost minus infinity, positives enqueued first.
    """
    grad = np.asarray(grad, dtype=np.float64)
    segment = np.asarray(segment, dtype=bool)
    if segment.shape != grad.shape:
        raise ValueError("segment mask shape must match gradient shape")
    if not segment.any():
        raise ValueError("segment is empty")
    for r, c in clicks.positive + clicks.negative:
        if not (0 <= r < grad.shape[0] and 0 <= c < grad.shape[1]) or not segment[r, c]:
            raise ValueError(f"seed {(r, c)} lies outside the segment")
    if not clicks.positive and not clicks.negative:
        raise ValueError("at least one seed set must be non-empty")
    if not clicks.negative:
        return segment.copy()
    if not clicks.positive:
        return np.zeros_like(segment)

    h, w = grad.shape
    flat_grad = grad.ravel()
    cost = np.full(h * w, np.inf)
    label = np.zeros(h * w, dtype=np.int8)
    done = np.zeros(h * w, dtype=bool)

    heap: list[tuple[float, int, int]] = []
    counter = 0
    for seeds, lab in ((clicks.positive, 1), (clicks.negative, 0)):
        for r, c in seeds:
            p = r * w + c
            cost[p] = -np.inf
            label[p] = lab
            heapq.heappush(heap, (-np.inf, counter, p))
            counter += 1

    seg_flat = segment.ravel()
    while heap:
        c_p, _, p = heapq.heappop(heap)
        if done[p]:
            continue
        done[p] = True
        r, c = divmod(p, w)
        for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if not (0 <= nr < h and 0 <= nc < w):
                continue
            q = nr * w + nc
            if not seg_flat[q] or done[q]:
                continue
            arc = (flat_grad[p] + flat_grad[q]) / 2.0
            new_cost = max(c_p, arc)
            if new_cost < cost[q]:
                cost[q] = new_cost
                label[q] = label[p]
                heapq.heappush(heap, (new_cost, counter, q))
                counter += 1

    out = np.zeros(h * w, dtype=bool)
    out[seg_flat] = label[seg_flat] == 1
    return out.reshape(h, w)
