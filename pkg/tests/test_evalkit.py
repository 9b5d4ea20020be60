import json
import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ccreid.evalkit import (EvalProtocol, cmc_map, cosine_distances, dump_embeddings, evaluate,
                            valid_mask, write_per_query, write_report)


def rec(ident, cam, cloth, sid=0):
    return SimpleNamespace(sample_id=sid, identity_id=ident, camera_id=cam, clothing_id=cloth)


def naive_cosine(a, b):
    na = math.sqrt(sum(v * v for v in a))
    nb = math.sqrt(sum(v * v for v in b))
    return 1.0 - sum(x * y for x, y in zip(a, b)) / (max(na, 1e-12) * max(nb, 1e-12))


def naive_eval(dist, queries, gallery, mode):
    """O(Q*G^2) reference: explicit ranks by pairwise comparison on a given distance matrix.

    The distance matrix is shared with the implementation so that exact ties
    (the stable tie-break) are compared on identical floats.
    """
    G = len(gallery)
    aps, firsts = [], []
    for i, q in enumerate(queries):
        d = [float(v) for v in dist[i]]
        valid = []
        for j, g in enumerate(gallery):
            same = g.identity_id == q.identity_id
            if same and g.camera_id == q.camera_id:
                continue
            if mode == "cloth_changing" and same and g.clothing_id == q.clothing_id:
                continue
            valid.append(j)
        rank = {}
        for j in valid:
            rank[j] = 1 + sum(1 for k in valid if d[k] < d[j] or (d[k] == d[j] and k < j))
        pos_ranks = sorted(rank[j] for j in valid if gallery[j].identity_id == q.identity_id)
        if not pos_ranks:
            continue
        aps.append(math.fsum((n + 1) / r for n, r in enumerate(pos_ranks)) / len(pos_ranks))
        firsts.append(pos_ranks[0])
    n = len(aps)
    cmc = [sum(1 for f in firsts if f <= k) / n for k in range(1, G + 1)]
    return math.fsum(aps) / n, cmc


def test_protocol_masks_example():
    q = rec(1, 0, 0)
    gallery = [rec(1, 0, 1), rec(1, 1, 0), rec(1, 1, 1), rec(2, 0, 0)]
    assert valid_mask(q, gallery, "standard").tolist() == [False, True, True, True]
    assert valid_mask(q, gallery, "cloth_changing").tolist() == [False, False, True, True]
    with pytest.raises(ValueError):
        valid_mask(q, [], "standard")
    with pytest.raises(ValueError):
        EvalProtocol("cross_domain")


def test_ap_hand_example():
    # valid ranking (by distance): neg, pos, pos, neg, neg, neg -> AP = (1/2 + 2/3) / 2
    q = [rec(0, 0, 0)]
    ids = [1, 0, 0, 1, 1, 1]
    gallery = [rec(i, 1, 1) for i in ids]
    g_emb = np.array([[1.0, 0.01 * k] for k in range(6)])
    r = cmc_map(np.array([[1.0, 0.0]]), g_emb, q, gallery, "standard")
    assert r.mAP == pytest.approx(0.58333, abs=1e-5)
    assert r.rank(1) == 0.0 and r.rank(2) == 1.0


def test_stable_tie_break():
    q = [rec(0, 0, 0)]
    gallery = [rec(1, 1, 0), rec(0, 1, 1)]
    r = cmc_map(np.ones((1, 2)), np.ones((2, 2)), q, gallery, "standard")
    assert r.orderings[0].tolist() == [0, 1]
    assert r.mAP == 0.5


def test_queries_without_positives_are_skipped():
    q = [rec(0, 0, 0), rec(5, 0, 0)]
    gallery = [rec(0, 1, 1), rec(1, 1, 1)]
    r = cmc_map(np.eye(2), np.eye(2), q, gallery, "standard")
    assert r.skipped == [1] and r.num_queries == 1
    with pytest.raises(ValueError):
        cmc_map(np.eye(2)[:1], np.eye(2), [rec(5, 0, 0)], gallery)


def _instance(r):
    Q, G = int(r.integers(1, 31)), int(r.integers(2, 61))
    n_id = int(r.integers(2, 6))
    mk = lambda n: [rec(int(r.integers(n_id)), int(r.integers(3)), int(r.integers(3)), k) for k in range(n)]
    # coarse values produce exact distance ties
    q_emb = r.integers(-2, 3, size=(Q, 4)).astype(float)
    g_emb = r.integers(-2, 3, size=(G, 4)).astype(float)
    q_emb[np.all(q_emb == 0, axis=1)] = 1.0
    g_emb[np.all(g_emb == 0, axis=1)] = 1.0
    return q_emb, g_emb, mk(Q), mk(G)


@pytest.mark.parametrize("mode", ["standard", "cloth_changing"])
def test_matches_naive_oracle_exactly(mode):
    r = np.random.default_rng(99)
    done = 0
    while done < 50:
        q_emb, g_emb, queries, gallery = _instance(r)
        try:
            got = cmc_map(q_emb, g_emb, queries, gallery, mode)
        except ValueError:
            continue
        dist = cosine_distances(q_emb, g_emb)
        for i in range(len(queries)):
            for j in range(len(gallery)):
                assert dist[i, j] == pytest.approx(naive_cosine(q_emb[i], g_emb[j]), abs=1e-12)
        mAP, cmc = naive_eval(dist, queries, gallery, mode)
        assert got.mAP == mAP
        assert got.cmc.tolist() == cmc
        done += 1


@given(st.integers(0, 10_000))
def test_rotation_and_scale_invariance(seed):
    r = np.random.default_rng(seed)
    q_emb, g_emb = r.normal(size=(5, 6)), r.normal(size=(12, 6))
    queries = [rec(i % 3, 0, 0) for i in range(5)]
    gallery = [rec(i % 3, 1, i % 2) for i in range(12)]
    rot, _ = np.linalg.qr(r.normal(size=(6, 6)))
    a = cmc_map(q_emb, g_emb, queries, gallery)
    b = cmc_map(3.0 * q_emb @ rot, g_emb @ rot * 0.5, queries, gallery)
    assert a.mAP == pytest.approx(b.mAP, abs=1e-12)


@given(st.integers(0, 10_000))
def test_cloth_changing_ranks_a_subset(seed):
    r = np.random.default_rng(seed)
    q_emb, g_emb = r.normal(size=(4, 3)), r.normal(size=(15, 3))
    queries = [rec(int(r.integers(3)), 0, int(r.integers(2))) for _ in range(4)]
    gallery = [rec(int(r.integers(3)), int(r.integers(2)), int(r.integers(2))) for _ in range(15)]
    try:
        std = cmc_map(q_emb, g_emb, queries, gallery, "standard")
        cc = cmc_map(q_emb, g_emb, queries, gallery, "cloth_changing")
    except ValueError:
        return
    for i in range(4):
        assert set(cc.orderings[i]) <= set(std.orderings[i])
        assert cc.positives[i] <= std.positives[i]


def test_cosine_distance_rejects_nan():
    with pytest.raises(ValueError):
        cosine_distances(np.array([[np.nan, 1.0]]), np.ones((1, 2)))


def test_report_files(tmp_path):
    queries = [rec(0, 0, 0, 10), rec(1, 0, 0, 11)]
    gallery = [rec(0, 1, 1, 20), rec(1, 1, 1, 21), rec(2, 1, 0, 22)]
    q_emb, g_emb = np.eye(3)[:2], np.eye(3)
    rep = evaluate(q_emb, g_emb, queries, gallery)
    assert set(rep) == {"standard", "cloth_changing"}
    assert rep["standard"]["Rank-1"] == 1.0 and rep["standard"]["protocol_family"] == "synthetic-generic"
    write_report(tmp_path / "r.json", rep)
    assert json.loads((tmp_path / "r.json").read_text()) == rep
    res = cmc_map(q_emb, g_emb, queries, gallery)
    write_per_query(tmp_path / "pq.csv", res, queries)
    lines = (tmp_path / "pq.csv").read_text().splitlines()
    assert lines[1].split(",")[:3] == ["0", "10", "0"] and lines[1].split(",")[4] == "1"
    dump_embeddings(tmp_path / "e.csv", gallery, g_emb, [0, 1, 2])
    assert (tmp_path / "e.csv").read_text().splitlines()[0].startswith("sample_id,identity_id,clothing_id,pseudo_label,v0")
