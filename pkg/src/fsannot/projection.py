"""2D projection of embedded segment features for the canvas.

A fuzzy kNN graph is built over the embedded vectors (per-point bandwidth
calibrated so the local weights sum to log2 k), optionally reweighted by
labels, then laid out by stochastic attraction along edges and uniform
negative sampling. New points drop into an existing layout without
refitting it; any subset can be re-projected on its own.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from numba import njit
from scipy.optimize import curve_fit
from scipy.spatial.distance import cdist

SIGMA_MIN = 1e-3
SMOOTH_TOL = 1e-5
BISECT_ITERS = 64
REPULSION = 1.0
INIT_RADIUS = 10.0


@dataclass(frozen=True)
class ProjectionConfig:
    k: int = 15
    min_dist: float = 0.01
    lam: float = 0.5
    epochs: int = 200
    negative_sample_rate: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if not 0.0 < self.min_dist < 1.0:
            raise ValueError("min_dist must be in (0, 1)")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must be in [0, 1]")
        if self.epochs < 1 or self.negative_sample_rate < 1:
            raise ValueError("epochs and negative_sample_rate must be >= 1")


def local_config(seed: int = 0) -> ProjectionConfig:
    """The pop-up re-projection preset: tighter neighborhood, looser spacing."""
    return ProjectionConfig(k=5, min_dist=0.1, epochs=100, seed=seed)


@dataclass(frozen=True)
class FuzzyGraph:
    points: np.ndarray  # n x d
    k: int
    knn_idx: np.ndarray  # n x k
    knn_dist: np.ndarray  # n x k
    rho: np.ndarray
    sigma: np.ndarray
    edge_i: np.ndarray  # undirected, i < j
    edge_j: np.ndarray
    edge_w: np.ndarray

    @property
    def n(self) -> int:
        return int(self.points.shape[0])


@dataclass(frozen=True)
class Layout2D:
    coords: np.ndarray  # n x 2
    a: float
    b: float


def _smooth_bandwidth(dists: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-row rho (nearest distance) and sigma solving sum w = log2(k)."""
    n = dists.shape[0]
    rho = dists[:, 0].copy()
    sigma = np.empty(n)
    target = np.log2(k)
    for i in range(n):
        lo, hi, mid = 0.0, np.inf, 1.0
        shifted = np.maximum(dists[i] - rho[i], 0.0)
        for _ in range(BISECT_ITERS):
            psum = float(np.exp(-shifted / mid).sum())
            if abs(psum - target) < SMOOTH_TOL:
                break
            if psum > target:
                hi = mid
                mid = (lo + hi) / 2.0
            else:
                lo = mid
                mid = mid * 2.0 if hi == np.inf else (lo + hi) / 2.0
        sigma[i] = max(mid, SIGMA_MIN)
    return rho, sigma


def _knn(points: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    dist = cdist(points, points)
    np.fill_diagonal(dist, np.inf)
    idx = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return idx, np.take_along_axis(dist, idx, axis=1)


def fuzzy_knn(
    points: np.ndarray,
    k: int,
    labels=None,
    lam: float = 0.5,
) -> FuzzyGraph:
    """Directed membership weights, symmetrized by fuzzy union.

    With labels, same-label edges are strengthened by lam and
    cross-label edges damped by it; edges with an unlabeled endpoint
    stay as geometry dictates.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be n x d")
    n = points.shape[0]
    if n <= k:
        raise ValueError(f"need more than k={k} points, got {n}")
    knn_idx, knn_dist = _knn(points, k)
    rho, sigma = _smooth_bandwidth(knn_dist, k)

    directed = {}
    for i in range(n):
        w_row = np.exp(-np.maximum(knn_dist[i] - rho[i], 0.0) / sigma[i])
        for j, w in zip(knn_idx[i], w_row):
            directed[(i, int(j))] = float(w)

    sym: dict[tuple[int, int], float] = {}
    for (i, j) in directed:
        key = (i, j) if i < j else (j, i)
        if key in sym:
            continue
        w1 = directed.get(key, 0.0)
        w2 = directed.get((key[1], key[0]), 0.0)
        sym[key] = w1 + w2 - w1 * w2

    if labels is not None and lam > 0.0:
        for (i, j), w in sym.items():
            li, lj = labels[i], labels[j]
            if li is None or lj is None:
                continue
            if li == lj:
                sym[(i, j)] = w + lam * (1.0 - w)
            else:
                sym[(i, j)] = w * (1.0 - lam)

    keys = sorted(sym)
    edge_i = np.array([ij[0] for ij in keys], dtype=np.int64)
    edge_j = np.array([ij[1] for ij in keys], dtype=np.int64)
    edge_w = np.array([sym[ij] for ij in keys], dtype=np.float64)
    return FuzzyGraph(
        points=points,
        k=k,
        knn_idx=knn_idx,
        knn_dist=knn_dist,
        rho=rho,
        sigma=sigma,
        edge_i=edge_i,
        edge_j=edge_j,
        edge_w=edge_w,
    )


def find_ab(min_dist: float, spread: float = 1.0) -> tuple[float, float]:
    """Least-squares (a, b) so 1/(1+a d^2b) tracks the min_dist falloff."""

    def curve(x, a, b):
        return 1.0 / (1.0 + a * x ** (2.0 * b))

    xv = np.linspace(0.0, spread * 3.0, 300)
    yv = np.where(xv < min_dist, 1.0, np.exp(-(xv - min_dist) / spread))
    params, _ = curve_fit(curve, xv, yv)
    return float(params[0]), float(params[1])


@njit(cache=True)
def _tau_rand(state):
    state[0] = (((state[0] & 4294967294) << 12) & 0xFFFFFFFF) ^ (
        (((state[0] << 13) & 0xFFFFFFFF) ^ state[0]) >> 19
    )
    state[1] = (((state[1] & 4294967288) << 4) & 0xFFFFFFFF) ^ (
        (((state[1] << 2) & 0xFFFFFFFF) ^ state[1]) >> 25
    )
    state[2] = (((state[2] & 4294967280) << 17) & 0xFFFFFFFF) ^ (
        (((state[2] << 3) & 0xFFFFFFFF) ^ state[2]) >> 11
    )
    return state[0] ^ state[1] ^ state[2]


@njit(cache=True)
def _clip(val):
    if val > 4.0:
        return 4.0
    if val < -4.0:
        return -4.0
    return val


@njit(cache=True)
def _optimize(
    emb,
    head,
    tail,
    epochs_per_sample,
    a,
    b,
    rng_state,
    n_epochs,
    initial_alpha,
    negative_sample_rate,
    movable,
):
    n_vertices = emb.shape[0]
    epochs_per_negative = epochs_per_sample / negative_sample_rate
    next_sample = epochs_per_sample.copy()
    next_negative = epochs_per_negative.copy()
    for epoch in range(n_epochs):
        alpha = initial_alpha * (1.0 - epoch / n_epochs)
        for e in range(head.shape[0]):
            if next_sample[e] > epoch:
                continue
            i = head[e]
            j = tail[e]
            dx = emb[i, 0] - emb[j, 0]
            dy = emb[i, 1] - emb[j, 1]
            d2 = dx * dx + dy * dy
            if d2 > 0.0:
                coeff = (-2.0 * a * b * d2 ** (b - 1.0)) / (1.0 + a * d2 ** b)
            else:
                coeff = 0.0
            gx = _clip(coeff * dx)
            gy = _clip(coeff * dy)
            if movable[i]:
                emb[i, 0] += gx * alpha
                emb[i, 1] += gy * alpha
            if movable[j]:
                emb[j, 0] -= gx * alpha
                emb[j, 1] -= gy * alpha
            next_sample[e] += epochs_per_sample[e]

            if movable[i]:
                n_neg = int((epoch - next_negative[e]) / epochs_per_negative[e])
                for _ in range(n_neg):
                    other = _tau_rand(rng_state) % n_vertices
                    dx = emb[i, 0] - emb[other, 0]
                    dy = emb[i, 1] - emb[other, 1]
                    d2 = dx * dx + dy * dy
                    if d2 > 0.0:
                        coeff = (2.0 * REPULSION * b) / ((0.001 + d2) * (1.0 + a * d2 ** b))
                    elif i == other:
                        continue
                    else:
                        coeff = 0.0
                    if coeff > 0.0:
                        gx = _clip(coeff * dx)
                        gy = _clip(coeff * dy)
                    else:
                        gx = 4.0
                        gy = 4.0
                    emb[i, 0] += gx * alpha
                    emb[i, 1] += gy * alpha
                next_negative[e] += n_neg * epochs_per_negative[e]
    return emb


def _rng_state(seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(128, 2**31 - 1, size=3).astype(np.int64)


def _directed_arrays(graph: FuzzyGraph):
    # both directions, sorted like a CSR walk; zero-weight edges dropped
    keep = graph.edge_w > 0.0
    ei, ej, ew = graph.edge_i[keep], graph.edge_j[keep], graph.edge_w[keep]
    head = np.concatenate([ei, ej])
    tail = np.concatenate([ej, ei])
    weight = np.concatenate([ew, ew])
    order = np.lexsort((tail, head))
    return head[order], tail[order], weight[order]


def _epochs_per_sample(weights: np.ndarray, n_epochs: int) -> np.ndarray:
    return weights.max() / weights  # sampled ~ weight/weight_max of epochs


def _random_disk(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    r = radius * np.sqrt(rng.random(n))
    theta = 2.0 * np.pi * rng.random(n)
    return np.column_stack([r * np.cos(theta), r * np.sin(theta)])


def layout(graph: FuzzyGraph, cfg: ProjectionConfig) -> Layout2D:
    a, b = find_ab(cfg.min_dist)
    if graph.n == 1:
        return Layout2D(coords=np.zeros((1, 2)), a=a, b=b)
    rng = np.random.default_rng(cfg.seed)
    emb = _random_disk(rng, graph.n, INIT_RADIUS)
    head, tail, weight = _directed_arrays(graph)
    if head.shape[0] > 0:
        emb = _optimize(
            emb,
            head,
            tail,
            _epochs_per_sample(weight, cfg.epochs),
            a,
            b,
            _rng_state(cfg.seed),
            cfg.epochs,
            1.0,
            float(cfg.negative_sample_rate),
            np.ones(graph.n, dtype=np.bool_),
        )
    return Layout2D(coords=emb, a=a, b=b)


def transform_new(
    points_new: np.ndarray,
    graph_old: FuzzyGraph,
    layout_old: Layout2D,
    cfg: ProjectionConfig,
) -> np.ndarray:
    """Place new points into a fixed layout.

    Each new point starts at the calibrated-weight mean of its nearest
    old points (exact duplicates land on their twin), then a short
    optimization run refines only the new coordinates.
    """
    points_new = np.asarray(points_new, dtype=np.float64)
    if layout_old.coords.shape[0] == 0:
        raise ValueError("old layout is empty")
    if points_new.shape[0] == 0:
        return np.zeros((0, 2))
    old_pts = graph_old.points
    n_old = old_pts.shape[0]
    k = min(cfg.k, n_old)

    dist = cdist(points_new, old_pts)
    idx = np.argsort(dist, axis=1, kind="stable")[:, :k]
    nn_dist = np.take_along_axis(dist, idx, axis=1)
    rho, sigma = _smooth_bandwidth(nn_dist, max(k, 2))

    init = np.empty((points_new.shape[0], 2))
    for i in range(points_new.shape[0]):
        if nn_dist[i, 0] == 0.0:
            init[i] = layout_old.coords[idx[i, 0]]
            continue
        w = np.exp(-np.maximum(nn_dist[i] - rho[i], 0.0) / sigma[i])
        init[i] = (w[:, None] * layout_old.coords[idx[i]]).sum(axis=0) / w.sum()

    n_total = n_old + points_new.shape[0]
    if n_total <= cfg.k:
        return init
    combined = np.vstack([old_pts, points_new])
    graph = fuzzy_knn(combined, cfg.k)
    coords = np.vstack([layout_old.coords, init])
    head, tail, weight = _directed_arrays(graph)
    movable = np.zeros(n_total, dtype=np.bool_)
    movable[n_old:] = True
    refine_epochs = max(1, cfg.epochs // 2)
    coords = _optimize(
        coords,
        head,
        tail,
        _epochs_per_sample(weight, refine_epochs),
        layout_old.a,
        layout_old.b,
        _rng_state(cfg.seed),
        refine_epochs,
        1.0,
        float(cfg.negative_sample_rate),
        movable,
    )
    return coords[n_old:]


def local_reproject(
    points: np.ndarray,
    cfg: Optional[ProjectionConfig] = None,
    labels=None,
) -> Layout2D:
    """Stand-alone layout of a subset, independent of the global canvas."""
    cfg = cfg if cfg is not None else local_config()
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] <= cfg.k:
        raise ValueError(f"subset of {points.shape[0]} needs more than k={cfg.k} points")
    graph = fuzzy_knn(points, cfg.k, labels=labels, lam=cfg.lam)
    return layout(graph, cfg)
