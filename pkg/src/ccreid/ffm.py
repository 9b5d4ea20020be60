"""Per-identity clustering into fine-grained pseudo labels and the
attribute-aware classification loss built on top of them."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.cluster import DBSCAN, KMeans
from torch.nn import functional as F


@dataclass
class FineGrainedAttribute:
    mu: torch.Tensor
    sigma: torch.Tensor
    pseudo_label: int = -1
    part_index: int = 0


@dataclass
class ClusterTable:
    """Fine-grained pseudo labels for one epoch.

    ``clusters[identity]`` lists that identity's clusters (each a sorted list
    of sample ids) in global label order. Labels of one identity are a
    contiguous block, so ``same_identity_sets[k]`` is that block.
    """

    clusters: dict[int, list[list[int]]]
    assignment: dict[int, int] = field(default_factory=dict)
    label_identity: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        label = 0
        identities = []
        self.assignment = {}
        self.same_identity_sets: dict[int, tuple[int, ...]] = {}
        for ident in sorted(self.clusters):
            block = tuple(range(label, label + len(self.clusters[ident])))
            for k, members in zip(block, self.clusters[ident]):
                for sid in members:
                    self.assignment[int(sid)] = k
                self.same_identity_sets[k] = block
                identities.append(ident)
            label += len(block)
        self.label_identity = np.array(identities, dtype=np.int64)

    @property
    def n_s(self) -> dict[int, int]:
        return {ident: len(c) for ident, c in self.clusters.items()}

    @property
    def N_s(self) -> int:
        return len(self.label_identity)

    def labels_for(self, sample_ids) -> np.ndarray:
        return np.array([self.assignment[int(s)] for s in sample_ids], dtype=np.int64)

    def smoothing_matrix(self, epsilon: float) -> torch.Tensor:
        """Row k holds the smoothed target distribution for pseudo label k."""
        T = torch.zeros(self.N_s, self.N_s, dtype=torch.float64)
        for k, block in self.same_identity_sets.items():
            for j, w in smoothing_weights(k, block, epsilon).items():
                T[k, j] = w
        return T


def _canonical(groups: dict[int, list[list[int]]]) -> ClusterTable:
    ordered = {ident: sorted((sorted(c) for c in cs), key=lambda c: c[0])
               for ident, cs in groups.items()}
    return ClusterTable(ordered)


def _group_by_identity(sample_ids, labels, identities=None):
    sample_ids = np.asarray(sample_ids)
    labels = np.asarray(labels)
    if len(sample_ids) != len(labels):
        raise ValueError("sample_ids and labels differ in length")
    by_id = {int(i): np.flatnonzero(labels == i) for i in np.unique(labels)}
    for ident in identities or ():
        if int(ident) not in by_id:
            raise ValueError(f"identity {ident} has no samples to cluster")
    return sample_ids, by_id


def cosine_distance(x: np.ndarray) -> np.ndarray:
    return np.clip(1.0 - x @ x.T, 0.0, 2.0)


def cluster_identities(features, labels, sample_ids=None, radius: float = 0.4,
                       min_samples: int = 1, identities=None) -> ClusterTable:
    """DBSCAN run separately on every identity's L2-normalized embeddings.

    Distances are cosine (``1 - dot``). Points left as noise (only possible
    with ``min_samples > 1``) become singleton clusters so every sample keeps
    a pseudo label.
    """
    if radius <= 0:
        raise ValueError("radius must be > 0")
    if min_samples < 1:
        raise ValueError("min_samples must be >= 1")
    feats = np.asarray(features.detach().cpu() if torch.is_tensor(features) else features,
                       dtype=np.float64)
    if sample_ids is None:
        sample_ids = np.arange(len(feats))
    sample_ids, by_id = _group_by_identity(sample_ids, labels, identities)
    groups = {}
    for ident, idx in by_id.items():
        dist = cosine_distance(feats[idx])
        lab = DBSCAN(eps=radius, min_samples=min_samples, metric="precomputed").fit_predict(dist)
        clusters: dict[int, list[int]] = {}
        for pos, c in enumerate(lab):
            key = int(c) if c >= 0 else -1 - pos
            clusters.setdefault(key, []).append(int(sample_ids[idx[pos]]))
        groups[ident] = list(clusters.values())
    return _canonical(groups)


def cluster_fixed_k(features, labels, sample_ids=None, k: int = 2, seed: int = 0) -> ClusterTable:
    """Per-identity k-means with a fixed cluster count (capped by group size)."""
    feats = np.asarray(features.detach().cpu() if torch.is_tensor(features) else features,
                       dtype=np.float64)
    if sample_ids is None:
        sample_ids = np.arange(len(feats))
    sample_ids, by_id = _group_by_identity(sample_ids, labels)
    groups = {}
    for ident, idx in by_id.items():
        kk = min(k, len(idx))
        if kk == 1:
            lab = np.zeros(len(idx), dtype=int)
        else:
            lab = KMeans(n_clusters=kk, n_init=4, random_state=seed).fit_predict(feats[idx])
        clusters: dict[int, list[int]] = {}
        for pos, c in enumerate(lab):
            clusters.setdefault(int(c), []).append(int(sample_ids[idx[pos]]))
        groups[ident] = list(clusters.values())
    return _canonical(groups)


def table_from_keys(sample_ids, labels, keys) -> ClusterTable:
    """Pseudo labels from given per-sample keys (e.g. ground-truth clothing ids)."""
    groups: dict[int, dict] = {}
    for sid, ident, key in zip(sample_ids, labels, keys):
        groups.setdefault(int(ident), {}).setdefault(key, []).append(int(sid))
    return _canonical({i: list(g.values()) for i, g in groups.items()})


def attribute_stats(fmap: torch.Tensor, min_var: float = 0.0):
    """Per-channel spatial mean and population std over the last two axes.

    ``min_var > 0`` floors the variance before the square root, which equals
    ``max(sigma, sqrt(min_var))`` and keeps the gradient finite.
    """
    mu = fmap.mean(dim=(-2, -1))
    var = ((fmap - mu[..., None, None]) ** 2).mean(dim=(-2, -1))
    if min_var > 0:
        var = var.clamp_min(min_var)
    return mu, var.sqrt()


def extract_attribute(fmap: torch.Tensor, part_index: int = 0, pseudo_label: int = -1) -> FineGrainedAttribute:
    mu, sigma = attribute_stats(fmap)
    return FineGrainedAttribute(mu, sigma, pseudo_label, part_index)


def smoothing_weights(target: int, same_identity: tuple[int, ...] | list[int], epsilon: float) -> dict[int, float]:
    members = list(same_identity)
    if target not in members:
        raise ValueError(f"target label {target} is not in its identity's cluster set")
    if not 0 <= epsilon < 1:
        raise ValueError("epsilon must be in [0, 1)")
    n = len(members)
    off = epsilon / n
    weights = {j: off for j in members}
    weights[target] = 1.0 - (n - 1) * epsilon / n
    return weights


@dataclass
class AttrClassifierState:
    weights: torch.Tensor  # (N_s, C)
    tau: float
    epsilon: float

    @torch.no_grad()
    def renormalize(self) -> None:
        self.weights.copy_(F.normalize(self.weights, dim=1))


def attr_logits(embeddings: torch.Tensor, weights: torch.Tensor, tau: float,
                normalize: bool = True) -> torch.Tensor:
    f = F.normalize(embeddings, dim=1) if normalize else embeddings
    return f @ weights.t() / tau


def attr_loss(embeddings: torch.Tensor, pseudo_labels, table: ClusterTable,
              state: AttrClassifierState, normalize: bool = True,
              targets: torch.Tensor | None = None) -> torch.Tensor:
    """Softmax over all clusters with targets smoothed across the identity's clusters.

    ``targets`` may pass a precomputed ``table.smoothing_matrix(epsilon)``.
    """
    labels = torch.as_tensor(np.asarray(pseudo_labels), dtype=torch.long)
    if state.weights.shape[0] != table.N_s:
        raise ValueError(f"classifier has {state.weights.shape[0]} rows but table has {table.N_s} clusters")
    if labels.numel() and (labels.min() < 0 or labels.max() >= table.N_s):
        raise ValueError("pseudo label out of range")
    if targets is None:
        targets = table.smoothing_matrix(state.epsilon)
    logp = F.log_softmax(attr_logits(embeddings, state.weights, state.tau, normalize), dim=1)
    return -(targets[labels].to(logp.dtype) * logp).sum(dim=1).mean()


@torch.no_grad()
def init_attr_classifier(table: ClusterTable, features, sample_ids, tau: float = 1 / 16,
                         epsilon: float = 0.1) -> AttrClassifierState:
    """Rows are the normalized means of each cluster's normalized embeddings."""
    feats = torch.as_tensor(np.asarray(features.detach().cpu() if torch.is_tensor(features) else features))
    feats = F.normalize(feats, dim=1)
    pos = {int(s): i for i, s in enumerate(sample_ids)}
    rows = []
    for ident in sorted(table.clusters):
        for members in table.clusters[ident]:
            rows.append(feats[[pos[s] for s in members]].mean(dim=0))
    weights = F.normalize(torch.stack(rows), dim=1)
    return AttrClassifierState(weights, tau, epsilon)


def cluster_dump(table: ClusterTable, records) -> dict:
    """identity -> clusters -> [(sample_id, clothing_id, viewpoint)] for offline inspection."""
    meta = {r.sample_id: r for r in records}
    return {str(ident): [[[s, int(meta[s].clothing_id), meta[s].viewpoint] for s in members]
                         for members in clusters]
            for ident, clusters in table.clusters.items()}
