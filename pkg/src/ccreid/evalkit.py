"""Cosine-distance retrieval evaluation with standard and cloth-changing protocols."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PROTOCOLS = ("standard", "cloth_changing")


@dataclass(frozen=True)
class EvalProtocol:
    mode: str = "standard"
    same_camera_rule: bool = True

    def __post_init__(self):
        if self.mode not in PROTOCOLS:
            raise ValueError(f"unknown protocol '{self.mode}'")


@dataclass
class RankingResult:
    protocol: str
    cmc: np.ndarray                 # (G,) averaged hit curve
    mAP: float
    ap: np.ndarray                  # (Q,) NaN for skipped queries
    orderings: list[np.ndarray] = field(repr=False)  # valid gallery indices by rank
    positives: list[set] = field(repr=False)
    skipped: list[int] = field(default_factory=list)

    @property
    def num_queries(self) -> int:
        return len(self.ap) - len(self.skipped)

    def rank(self, k: int) -> float:
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def report(self, ranks=(1, 5, 10)) -> dict:
        out = {"protocol": self.protocol, "protocol_family": "synthetic-generic"}
        for k in ranks:
            out[f"Rank-{k}"] = self.rank(k)
        out.update(mAP=float(self.mAP), num_queries=self.num_queries, num_skipped=len(self.skipped))
        return out


def _meta(records):
    return (np.array([r.identity_id for r in records]),
            np.array([r.camera_id for r in records]),
            np.array([r.clothing_id for r in records]))


def valid_masks(q_ids, q_cams, q_cloth, g_ids, g_cams, g_cloth, protocol) -> np.ndarray:
    """(Q, G) mask of gallery entries each query is ranked against."""
    mode = protocol.mode if isinstance(protocol, EvalProtocol) else protocol
    EvalProtocol(mode)
    same_id = np.asarray(q_ids)[:, None] == np.asarray(g_ids)[None, :]
    drop = same_id & (np.asarray(q_cams)[:, None] == np.asarray(g_cams)[None, :])
    if mode == "cloth_changing":
        drop |= same_id & (np.asarray(q_cloth)[:, None] == np.asarray(g_cloth)[None, :])
    return ~drop


def valid_mask(query, gallery, protocol) -> np.ndarray:
    if len(gallery) == 0:
        raise ValueError("gallery is empty")
    q = _meta([query])
    return valid_masks(*q, *_meta(gallery), protocol)[0]


def cosine_distances(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if not (np.isfinite(q).all() and np.isfinite(g).all()):
        raise ValueError("non-finite embeddings")
    q = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
    g = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
    return 1.0 - q @ g.T


def cmc_map(q_emb, g_emb, queries, gallery, protocol="standard") -> RankingResult:
    """Rank the gallery per query by ascending cosine distance (ties by index)."""
    mode = protocol.mode if isinstance(protocol, EvalProtocol) else protocol
    dist = cosine_distances(q_emb, g_emb)
    qm, gm = _meta(queries), _meta(gallery)
    mask = valid_masks(*qm, *gm, mode)
    G = dist.shape[1]
    cmc_sum = np.zeros(G)
    ap = np.full(len(queries), np.nan)
    orderings, positives, skipped = [], [], []
    for i in range(len(queries)):
        order = np.argsort(dist[i], kind="stable")
        order = order[mask[i, order]]
        orderings.append(order)
        match = gm[0][order] == qm[0][i]
        positives.append(set(order[match].tolist()))
        if not match.any():
            skipped.append(i)
            continue
        hit_ranks = np.flatnonzero(match) + 1
        ap[i] = math.fsum(k / r for k, r in enumerate(hit_ranks.tolist(), start=1)) / len(hit_ranks)
        cmc_sum[hit_ranks[0] - 1:] += 1
    n = len(queries) - len(skipped)
    if n == 0:
        raise ValueError("no query has a valid positive under this protocol")
    mAP = math.fsum(a for a in ap.tolist() if not math.isnan(a)) / n
    return RankingResult(mode, cmc_sum / n, mAP, ap, orderings, positives, skipped)


def evaluate(q_emb, g_emb, queries, gallery, protocols=PROTOCOLS, ranks=(1, 5, 10)) -> dict:
    return {p: cmc_map(q_emb, g_emb, queries, gallery, p).report(ranks) for p in protocols}


def write_report(path: str | Path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2))


def write_per_query(path: str | Path, result: RankingResult, queries) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query_index", "sample_id", "identity_id", "AP", "first_hit_rank", "num_positives"])
        for i, q in enumerate(queries):
            order, pos = result.orderings[i], result.positives[i]
            first = next((r + 1 for r, g in enumerate(order) if g in pos), "")
            w.writerow([i, q.sample_id, q.identity_id, "" if np.isnan(result.ap[i]) else result.ap[i],
                        first, len(pos)])


def dump_embeddings(path: str | Path, records, embeddings, pseudo_labels=None) -> None:
    """CSV rows: sample_id, identity, clothing, pseudo_label, v0..v{C-1}."""
    emb = np.asarray(embeddings)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "identity_id", "clothing_id", "pseudo_label"]
                   + [f"v{j}" for j in range(emb.shape[1])])
        for i, r in enumerate(records):
            pl = "" if pseudo_labels is None else int(pseudo_labels[i])
            w.writerow([r.sample_id, r.identity_id, r.clothing_id, pl] + [f"{v:.8g}" for v in emb[i]])
