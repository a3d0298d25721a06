"""Linear embedding head trained with the large-margin triplet loss.

Labeled segments pull same-class features together and push other classes
at least a margin away. The head is a bias-free matrix applied to frozen
feature vectors; training is plain SGD with momentum and decoupled weight
decay on a stream of uniformly mined triplets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientLabelsError

EMBED_DIM = 128


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.05
    momentum: float = 0.8
    weight_decay: float = 0.0005
    epochs: int = 3
    triplets_per_epoch: int = 1000
    learning_rate: float = 0.1
    lr_decay: float = 10.0  # divide per epoch
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.margin < 1.0:
            raise ValueError("margin must be in (0, 1)")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        # zero rates are legal so shrink-only / no-op updates stay expressible
        if self.weight_decay < 0.0 or self.learning_rate < 0.0:
            raise ValueError("weight decay and learning rate must be >= 0")
        if self.epochs < 1 or self.triplets_per_epoch < 1:
            raise ValueError("epochs and triplets_per_epoch must be >= 1")
        if self.lr_decay < 1.0:
            raise ValueError("lr_decay must be >= 1")


@dataclass(frozen=True)
class EmbeddingHead:
    weight: np.ndarray  # D_in x D_emb, no bias

    @property
    def d_in(self) -> int:
        return int(self.weight.shape[0])

    @property
    def d_emb(self) -> int:
        return int(self.weight.shape[1])


def _ortho(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    # rows >= cols; orthonormal columns with canonical sign
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def init_head(d_in: int, d_emb: int = EMBED_DIM, seed: int = 0) -> EmbeddingHead:
    """Seeded orthonormal init scaled by 1/sqrt(D_in)."""
    rng = np.random.default_rng(seed)
    if d_in >= d_emb:
        w = _ortho(rng, d_in, d_emb)
    else:
        w = _ortho(rng, d_emb, d_in).T
    return EmbeddingHead(weight=w / np.sqrt(d_in))


def embed(head: EmbeddingHead, phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape[-1] != head.d_in:
        raise ValueError(f"feature dimension {phi.shape[-1]} != head D_in {head.d_in}")
    return phi @ head.weight


def triplet_loss(a: np.ndarray, p: np.ndarray, n: np.ndarray, margin: float) -> float:
    d_ap = float(np.linalg.norm(np.asarray(a) - np.asarray(p)))
    d_an = float(np.linalg.norm(np.asarray(a) - np.asarray(n)))
    return max(0.0, d_ap - d_an + margin)


def triplet_loss_grad(
    head: EmbeddingHead,
    fa: np.ndarray,
    fp: np.ndarray,
    fn: np.ndarray,
    margin: float,
) -> tuple[float, np.ndarray]:
    """Loss of one raw-feature triplet and its gradient w.r.t. the head.

    d/dW of ||(a-p) W|| is outer(a-p, unit((a-p) W)); zero-distance terms
    take the zero subgradient, as does an inactive margin.
    """
    w = head.weight
    dap_vec = (np.asarray(fa, dtype=np.float64) - np.asarray(fp, dtype=np.float64))
    dan_vec = (np.asarray(fa, dtype=np.float64) - np.asarray(fn, dtype=np.float64))
    eap = dap_vec @ w
    ean = dan_vec @ w
    d_ap = float(np.linalg.norm(eap))
    d_an = float(np.linalg.norm(ean))
    loss = d_ap - d_an + margin
    if loss <= 0.0:
        return 0.0, np.zeros_like(w)
    grad = np.zeros_like(w)
    if d_ap > 0.0:
        grad += np.outer(dap_vec, eap / d_ap)
    if d_an > 0.0:
        grad -= np.outer(dan_vec, ean / d_an)
    return loss, grad


def mine_triplets(labels, count: int, seed: int) -> list[tuple[int, int, int]]:
    """Uniform (anchor, positive, negative) index triples, reproducible.

    ``labels`` maps sample index to label by position; None means
    unlabeled and is never sampled. Anchors come from classes with at
    least two samples.
    """
    by_label: dict = {}
    for idx, lab in enumerate(labels):
        if lab is None:
            continue
        by_label.setdefault(lab, []).append(idx)
    if len(by_label) < 2:
        raise InsufficientLabelsError("need at least two labeled classes")
    anchor_pool = [idx for members in by_label.values() if len(members) >= 2 for idx in members]
    if not anchor_pool:
        raise InsufficientLabelsError("need a class with at least two samples")
    label_of = {idx: lab for lab, members in by_label.items() for idx in members}
    all_labeled = sorted(label_of)
    others = {
        lab: [idx for idx in all_labeled if label_of[idx] != lab] for lab in by_label
    }

    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        a = anchor_pool[int(rng.integers(len(anchor_pool)))]
        same = by_label[label_of[a]]
        while True:
            p = same[int(rng.integers(len(same)))]
            if p != a:
                break
        other = others[label_of[a]]
        n = other[int(rng.integers(len(other)))]
        out.append((a, p, n))
    return out


def train_round(
    features: np.ndarray,
    labels,
    head: EmbeddingHead,
    cfg: TrainConfig = TrainConfig(),
    on_epoch=None,
) -> tuple[EmbeddingHead, list[float]]:
    """One schedule of SGD epochs; returns the new head and per-epoch mean loss.

    Per step: velocity = momentum * velocity - lr * grad, then the head
    shrinks by (1 - weight_decay) before the velocity is added, so weight
    decay acts even at zero learning rate.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != head.d_in:
        raise ValueError("features must be n x D_in")
    w = head.weight.astype(np.float64).copy()
    velocity = np.zeros_like(w)
    trace = []
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate / (cfg.lr_decay ** epoch)
        triplets = mine_triplets(labels, cfg.triplets_per_epoch, cfg.seed + epoch)
        total = 0.0
        for a, p, n in triplets:
            loss, grad = triplet_loss_grad(
                EmbeddingHead(weight=w), features[a], features[p], features[n], cfg.margin
            )
            total += loss
            velocity = cfg.momentum * velocity - lr * grad
            w = (1.0 - cfg.weight_decay) * w + velocity
        trace.append(total / cfg.triplets_per_epoch)
        if on_epoch is not None:
            on_epoch(epoch + 1, trace[-1])
    return EmbeddingHead(weight=w), trace
