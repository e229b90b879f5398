"""Tone-style scorer: a projection head over tone features trained with a
supervised contrastive loss, then refined on ranked preferences with a
cosine triplet loss."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .augment import DegradationConfig, degrade
from .features import feature_dim, tone_features
from .nn import MLP, SGD

_DEGENERATE_NORM = 1e-12


@dataclass
class ScorerConfig:
    tau: float = 0.1
    margin: float = 0.3
    learning_rate: float = 0.2
    epochs: int = 40
    batch_size: int = 64
    items_per_label: int = 4
    seed: int = 0
    hidden: int = 64
    embed_dim: int = 32
    bins: int = 16
    stage2_learning_rate: float = 0.05
    stage2_epochs: int = 60
    degradations: DegradationConfig = field(default_factory=DegradationConfig)

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.margin < 0:
            raise ValueError("margin must be nonnegative")
        if isinstance(self.degradations, dict):
            self.degradations = DegradationConfig(**self.degradations)


class ProjectionHead(MLP):
    """Two affine layers with tanh between: D -> H -> E."""

    def __init__(self, in_dim: int, hidden: int = 64, out_dim: int = 32, rng=None, params=None):
        super().__init__([in_dim, hidden, out_dim], rng=rng, params=params)

    @property
    def bins(self) -> int:
        return (self.sizes[0] - 6) // 3

    def copy(self) -> "ProjectionHead":
        return ProjectionHead(*self.sizes, params=[p.copy() for p in self.params])

    @classmethod
    def from_dict(cls, d: dict) -> "ProjectionHead":
        m = MLP.from_dict(d)
        return cls(*m.sizes, params=m.params)


@dataclass
class RankingGroup:
    """An anchor, four candidates and their human ranking.

    ``human_order`` lists candidate indices from most to least similar.
    """

    anchor: Any
    candidates: tuple
    human_order: tuple[int, ...] = (0, 1, 2, 3)

    def __post_init__(self):
        self.candidates = tuple(self.candidates)
        self.human_order = tuple(int(i) for i in self.human_order)
        if len(self.candidates) != 4:
            raise ValueError("a ranking group has exactly 4 candidates")
        if sorted(self.human_order) != [0, 1, 2, 3]:
            raise ValueError("human_order must be a permutation of the candidate indices")


# -- embedding ---------------------------------------------------------------


def normalize_rows(U: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unit-normalize rows; zero rows fall back to the first basis vector.

    Returns:
        ``(Z, norms, degenerate)``.
    """
    norms = np.linalg.norm(U, axis=1)
    degenerate = norms < _DEGENERATE_NORM
    Z = U / np.where(degenerate, 1.0, norms)[:, None]
    if degenerate.any():
        Z[degenerate] = 0.0
        Z[degenerate, 0] = 1.0
    return Z, norms, degenerate


def normalize_backward(Z: np.ndarray, norms: np.ndarray, degenerate: np.ndarray, dZ: np.ndarray) -> np.ndarray:
    dU = (dZ - Z * np.sum(Z * dZ, axis=1, keepdims=True)) / np.where(degenerate, 1.0, norms)[:, None]
    dU[degenerate] = 0.0
    return dU


def embed(f: np.ndarray, head: ProjectionHead) -> tuple[np.ndarray, bool]:
    """Unit embedding of one feature vector and whether the fallback was used."""
    f = np.asarray(f, dtype=float)
    if f.shape != (head.sizes[0],):
        raise ValueError(f"feature dimension {f.shape} does not match head input {head.sizes[0]}")
    Z, _, deg = normalize_rows(head(f[None, :]))
    return Z[0], bool(deg[0])


def embed_batch(F: np.ndarray, head: ProjectionHead) -> np.ndarray:
    return normalize_rows(head(np.asarray(F, dtype=float)))[0]


def tone_similarity(a: np.ndarray, b: np.ndarray, head: ProjectionHead) -> float:
    """Cosine similarity of the embeddings of two RGB images."""
    Z = embed_batch(np.stack([tone_features(a, head.bins), tone_features(b, head.bins)]), head)
    return float(np.clip(Z[0] @ Z[1], -1.0, 1.0))


# -- losses -------------------------------------------------------------------


def supcon_loss(Z: np.ndarray, labels: Sequence, tau: float) -> tuple[float, np.ndarray]:
    """Supervised contrastive loss over unit embeddings and its gradient.

    Anchors without a positive in the batch are skipped; a batch with no
    anchors gives zero loss and gradient.
    """
    labels = np.asarray(labels)
    n = Z.shape[0]
    S = (Z @ Z.T) / tau
    off = ~np.eye(n, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & off
    n_pos = pos.sum(axis=1)
    anchors = n_pos > 0
    if not anchors.any():
        return 0.0, np.zeros_like(Z)
    masked = np.where(off, S, -np.inf)
    mx = masked.max(axis=1, keepdims=True)
    e = np.where(off, np.exp(masked - mx), 0.0)
    denom = e.sum(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(denom[:, 0])
    q = e / denom
    safe_n = np.maximum(n_pos, 1)
    per_anchor = -(np.where(pos, S, 0.0).sum(axis=1) - n_pos * lse) / safe_n
    n_anchor = anchors.sum()
    loss = float(per_anchor[anchors].sum() / n_anchor)
    G = (q - pos / safe_n[:, None]) * anchors[:, None] / n_anchor
    dZ = (G + G.T) @ Z / tau
    return loss, dZ


def contrastive_loss(
    features: np.ndarray, labels: Sequence, head: ProjectionHead, tau: float
) -> tuple[float, list[np.ndarray]]:
    """Supervised contrastive loss of a labeled feature batch and head parameter gradients."""
    features = np.asarray(features, dtype=float)
    if features.shape[0] < 2:
        raise ValueError("a contrastive batch needs at least 2 items")
    U, acts = head.forward(features)
    Z, norms, deg = normalize_rows(U)
    loss, dZ = supcon_loss(Z, labels, tau)
    grads, _ = head.backward(acts, normalize_backward(Z, norms, deg, dZ))
    return loss, grads


def _cosine_and_grads(u: np.ndarray, v: np.ndarray):
    nu = np.linalg.norm(u, axis=1, keepdims=True)
    nv = np.linalg.norm(v, axis=1, keepdims=True)
    cos = np.sum(u * v, axis=1, keepdims=True) / (nu * nv)
    du = v / (nu * nv) - cos * u / nu**2
    dv = u / (nu * nv) - cos * v / nv**2
    return cos[:, 0], du, dv


def triplet_loss(
    za: np.ndarray, zp: np.ndarray, zn: np.ndarray, m: float
) -> tuple[float, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Mean of ``max(0, d(a, p) - d(a, n) + m)`` with cosine distance ``d = 1 - cos``.

    Accepts single vectors or row batches; gradients have the input shapes.
    """
    single = np.ndim(za) == 1
    za, zp, zn = (np.atleast_2d(np.asarray(z, dtype=float)) for z in (za, zp, zn))
    cos_ap, dap_a, dap_p = _cosine_and_grads(za, zp)
    cos_an, dan_a, dan_n = _cosine_and_grads(za, zn)
    hinge = (1.0 - cos_ap) - (1.0 - cos_an) + m
    active = (hinge > 0).astype(float)[:, None] / za.shape[0]
    loss = float(np.sum(np.maximum(hinge, 0.0)) / za.shape[0])
    ga = active * (dan_a - dap_a)
    gp = -active * dap_p
    gn = active * dan_n
    if single:
        return loss, (ga[0], gp[0], gn[0])
    return loss, (ga, gp, gn)


def triplet_objective(
    head: ProjectionHead, Fa: np.ndarray, Fp: np.ndarray, Fn: np.ndarray, m: float
) -> tuple[float, list[np.ndarray]]:
    """Triplet loss of feature triplets through the head, with parameter gradients."""
    k = Fa.shape[0]
    U, acts = head.forward(np.concatenate([Fa, Fp, Fn]))
    Z, norms, deg = normalize_rows(U)
    loss, (ga, gp, gn) = triplet_loss(Z[:k], Z[k : 2 * k], Z[2 * k :], m)
    grads, _ = head.backward(acts, normalize_backward(Z, norms, deg, np.concatenate([ga, gp, gn])))
    return loss, grads


def rankings_to_pairs(group: RankingGroup) -> list[tuple]:
    """(anchor, higher, lower) for every ordered pair of the human ranking."""
    ranked = [group.candidates[i] for i in group.human_order]
    return [(group.anchor, hi, lo) for hi, lo in combinations(ranked, 2)]


# -- training -------------------------------------------------------------------


def _check_labels(labels: np.ndarray) -> None:
    _, counts = np.unique(labels, return_counts=True)
    if (counts >= 2).sum() < 2:
        raise ValueError("stage-1 training needs at least 2 labels with at least 2 items each")


def balanced_batches(labels: np.ndarray, batch_size: int, per_label: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One epoch of batches built from same-label chunks of ``per_label`` items.

    Each item appears exactly once; a label's leftover single item joins its
    previous chunk so every item has a positive partner.
    """
    chunks = []
    for lab in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == lab))
        parts = [idx[i : i + per_label] for i in range(0, len(idx), per_label)]
        if len(parts) > 1 and len(parts[-1]) < 2:
            parts[-2] = np.concatenate([parts[-2], parts.pop()])
        chunks.extend(parts)
    order = rng.permutation(len(chunks))
    per_batch = max(1, batch_size // per_label)
    return [np.concatenate([chunks[j] for j in order[i : i + per_batch]]) for i in range(0, len(order), per_batch)]


def train_stage1(
    images: Sequence[np.ndarray], labels: Sequence, cfg: ScorerConfig, log: Callable[[str], None] | None = None
) -> tuple[ProjectionHead, list[float]]:
    """Contrastive training of a fresh projection head on preset-labeled images.

    Each epoch re-extracts features from freshly degraded copies of the images.

    Returns:
        ``(head, per-epoch mean loss)``.
    """
    labels = np.asarray(labels)
    if len(images) != len(labels):
        raise ValueError("images and labels differ in length")
    _check_labels(labels)
    rng = np.random.default_rng(cfg.seed)
    head = ProjectionHead(feature_dim(cfg.bins), cfg.hidden, cfg.embed_dim, rng=rng)
    opt = SGD(cfg.learning_rate)
    trace: list[float] = []
    for epoch in range(cfg.epochs):
        feats = np.stack([tone_features(degrade(img, cfg.degradations, rng), cfg.bins) for img in images])
        losses = []
        for idx in balanced_batches(labels, cfg.batch_size, cfg.items_per_label, rng):
            if len(idx) < 2:
                continue
            loss, grads = contrastive_loss(feats[idx], labels[idx], head, cfg.tau)
            opt.step(head.params, grads)
            losses.append(loss)
        trace.append(float(np.mean(losses)))
        if log:
            log(f"stage1 epoch {epoch} loss {trace[-1]:.4f}")
    return head, trace


def _feature_of(item, features: Mapping | None, bins: int) -> np.ndarray:
    if features is not None:
        return np.asarray(features[item], dtype=float)
    arr = np.asarray(item, dtype=float)
    return arr if arr.ndim == 1 else tone_features(arr, bins)


def train_stage2(
    head: ProjectionHead,
    groups: Sequence[RankingGroup],
    cfg: ScorerConfig,
    features: Mapping | None = None,
) -> tuple[ProjectionHead, list[float]]:
    """Triplet-loss fine-tuning of a copy of ``head`` on ranked groups.

    Group items are images, feature vectors, or keys into ``features``.
    """
    if not groups:
        raise ValueError("stage-2 fine-tuning needs at least one ranking group")
    head = head.copy()
    triplets = [t for g in groups for t in rankings_to_pairs(g)]
    Fa, Fp, Fn = (np.stack([_feature_of(t[i], features, head.bins) for t in triplets]) for i in range(3))
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(cfg.stage2_learning_rate)
    trace: list[float] = []
    for _ in range(cfg.stage2_epochs):
        order = rng.permutation(len(triplets))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = triplet_objective(head, Fa[idx], Fp[idx], Fn[idx], cfg.margin)
            opt.step(head.params, grads)
            losses.append(loss)
        trace.append(float(np.mean(losses)))
    return head, trace


# -- evaluation -------------------------------------------------------------------


def recall_at_k(
    gallery: np.ndarray, gallery_labels: Sequence, queries: np.ndarray, query_labels: Sequence, k: int
) -> float:
    """Fraction of queries with a same-label item among their top-k cosine neighbors.

    Ties are broken by gallery index.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    gallery = np.asarray(gallery, dtype=float)
    if gallery.shape[0] == 0:
        raise ValueError("empty gallery")
    G = normalize_rows(gallery)[0]
    Q = normalize_rows(np.atleast_2d(np.asarray(queries, dtype=float)))[0]
    order = np.argsort(-(Q @ G.T), axis=1, kind="stable")[:, :k]
    glab = np.asarray(gallery_labels)
    hits = (glab[order] == np.asarray(query_labels)[:, None]).any(axis=1)
    return float(hits.mean())


def preference_accuracy_embeddings(groups: Sequence[RankingGroup], embedding: Callable[[Any], np.ndarray]) -> float:
    """PAcc given a function mapping group items to unit embeddings; ties count 0.5."""
    if not groups:
        raise ValueError("need at least one ranking group")
    score, total = 0.0, 0
    for g in groups:
        for a, hi, lo in rankings_to_pairs(g):
            za = embedding(a)
            s_hi, s_lo = float(za @ embedding(hi)), float(za @ embedding(lo))
            score += 1.0 if s_hi > s_lo else 0.5 if s_hi == s_lo else 0.0
            total += 1
    return score / total


def preference_accuracy(
    groups: Sequence[RankingGroup], head: ProjectionHead, features: Mapping | None = None
) -> float:
    return preference_accuracy_embeddings(groups, lambda item: embed(_feature_of(item, features, head.bins), head)[0])


# -- serialization ------------------------------------------------------------------


def save_head(head: ProjectionHead, path, cfg: ScorerConfig | None = None) -> None:
    d = {"type": "projection_head", **head.to_dict(), "config": asdict(cfg) if cfg else None}
    Path(path).write_text(json.dumps(d, sort_keys=True))


def load_head(path) -> ProjectionHead:
    d = json.loads(Path(path).read_text())
    if d.get("type") != "projection_head":
        raise ValueError(f"{path} is not a projection head file")
    return ProjectionHead.from_dict(d)


def write_embeddings(path, Z: np.ndarray, ids: Sequence[str]) -> None:
    """Little-endian float32 rows at ``path`` plus a ``path.json`` sidecar."""
    Z = np.asarray(Z, dtype="<f4")
    if Z.ndim != 2 or Z.shape[0] != len(ids):
        raise ValueError("embeddings must be (count, dim) with one id per row")
    Path(path).write_bytes(Z.tobytes())
    Path(f"{path}.json").write_text(json.dumps({"count": Z.shape[0], "dim": Z.shape[1], "ids": list(ids)}))


def read_embeddings(path) -> tuple[np.ndarray, list[str]]:
    meta = json.loads(Path(f"{path}.json").read_text())
    Z = np.frombuffer(Path(path).read_bytes(), dtype="<f4").reshape(meta["count"], meta["dim"])
    return Z.astype(float), meta["ids"]
