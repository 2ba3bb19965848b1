import math

import numpy as np
import pytest

from cellgat.edgefeat import (
    EdgeFeatureStats,
    assemble_edge_features,
    edge_attention_features,
    embedding_dot_per_edge,
    forman_ricci,
    generate_walks,
    node2vec_embed,
    train_auxiliary,
)
from cellgat.errors import DataError
from cellgat.graph import add_self_loops, from_edge_arrays


def ugraph(n, edges, weights=None, loops=False):
    if weights is None:
        weights = [1.0] * len(edges)
    src, dst, w = [], [], []
    for (u, v), wt in zip(edges, weights):
        src += [u, v]
        dst += [v, u]
        w += [wt, wt]
    g = from_edge_arrays(n, np.array(src), np.array(dst), np.array(w, dtype=np.float64))
    return add_self_loops(g) if loops else g


def two_cliques(size=8, loops=False):
    edges = []
    for base in (0, size):
        for i in range(size):
            for j in range(i + 1, size):
                edges.append((base + i, base + j))
    edges.append((size - 1, size))  # bridge
    return ugraph(2 * size, edges, loops=loops)


def ric_reference(g):
    """Original incident-sum form: 2 - sum over the OTHER edges at each
    endpoint of w_e / sqrt(w_e * w_other)."""
    src = g.edge_src()
    dst = g.col_idx
    w = g.edge_weight
    inc = [[] for _ in range(g.n_nodes)]  # (undirected key, weight) per node
    for e in range(g.n_edges):
        u, v = int(src[e]), int(dst[e])
        if u == v or u > v:
            continue
        inc[u].append(((u, v), float(w[e])))
        inc[v].append(((u, v), float(w[e])))
    out = np.empty(g.n_edges)
    for e in range(g.n_edges):
        u, v, we = int(src[e]), int(dst[e]), float(w[e])
        if u == v:
            s = sum(1.0 / math.sqrt(x) for _, x in inc[u])
            out[e] = 4.0 - 2.0 * (s + 1.0)
            continue
        key = (min(u, v), max(u, v))
        su = sum(we / math.sqrt(we * x) for k, x in inc[u] if k != key)
        sv = sum(we / math.sqrt(we * x) for k, x in inc[v] if k != key)
        out[e] = 2.0 - su - sv
    return out


# ---------------------------------------------------------------------------
# curvature


def test_curvature_unweighted_closed_form():
    rng = np.random.default_rng(0)
    edges = sorted({tuple(sorted((int(a), int(b)))) for a, b in rng.integers(0, 10, (25, 2)) if a != b})
    g = ugraph(10, edges)
    ric = forman_ricci(g)
    deg = np.diff(g.row_ptr)
    src = g.edge_src()
    assert np.allclose(ric, 4.0 - deg[src] - deg[g.col_idx], atol=1e-12)


def test_curvature_isolated_edge_is_two():
    g = ugraph(2, [(0, 1)])
    assert np.array_equal(forman_ricci(g), np.array([2.0, 2.0]))


def test_curvature_weighted_matches_reference():
    rng = np.random.default_rng(1)
    edges = sorted({tuple(sorted((int(a), int(b)))) for a, b in rng.integers(0, 9, (20, 2)) if a != b})
    weights = rng.uniform(0.2, 4.0, len(edges)).tolist()
    g = ugraph(9, edges, weights)
    assert np.allclose(forman_ricci(g), ric_reference(g), atol=1e-12)


def test_curvature_self_loop_convention():
    g = ugraph(4, [(0, 1), (0, 2), (0, 3)], loops=True)
    ric = forman_ricci(g)
    src = g.edge_src()
    dst = g.col_idx
    for e in range(g.n_edges):
        u, v = int(src[e]), int(dst[e])
        if u == v:
            expect = -4.0 if u == 0 else 0.0
        else:
            expect = 0.0  # 4 - 3 - 1 on every spoke
        assert ric[e] == pytest.approx(expect, abs=1e-14)
    assert np.allclose(ric, ric_reference(g), atol=1e-12)


def test_curvature_ignores_weights_when_told():
    g = ugraph(3, [(0, 1), (1, 2)], weights=[5.0, 0.3])
    unweighted = forman_ricci(g, use_weights=False)
    deg = np.diff(g.row_ptr)
    src = g.edge_src()
    assert np.allclose(unweighted, 4.0 - deg[src] - deg[g.col_idx])
    assert not np.allclose(forman_ricci(g), unweighted)


def test_curvature_rejects_nonpositive_weight():
    g = ugraph(2, [(0, 1)], weights=[0.0])
    with pytest.raises(DataError):
        forman_ricci(g)


def test_curvature_symmetric_per_pair():
    rng = np.random.default_rng(2)
    edges = sorted({tuple(sorted((int(a), int(b)))) for a, b in rng.integers(0, 8, (15, 2)) if a != b})
    g = ugraph(8, edges, rng.uniform(0.5, 2.0, len(edges)).tolist())
    ric = forman_ricci(g)
    src = g.edge_src()
    lookup = {(int(u), int(v)): r for u, v, r in zip(src, g.col_idx, ric)}
    for (u, v), r in lookup.items():
        assert lookup[(v, u)] == r


# ---------------------------------------------------------------------------
# walks


def edge_set(g):
    return set(zip(g.edge_src().tolist(), g.col_idx.tolist()))


def test_walks_start_everywhere_and_follow_edges():
    g = two_cliques(5)
    walks = generate_walks(g, n_walks=3, walk_length=10, seed=0)
    assert walks.shape == (30, 10)
    assert np.array_equal(walks[:, 0], np.repeat(np.arange(10), 3))
    edges = edge_set(g)
    for row in walks:
        for a, b in zip(row[:-1], row[1:]):
            assert (int(a), int(b)) in edges
    again = generate_walks(g, n_walks=3, walk_length=10, seed=0)
    assert np.array_equal(walks, again)


def test_walks_biased_path_follows_edges():
    g = two_cliques(4)
    walks = generate_walks(g, n_walks=2, walk_length=8, p=2.0, q=0.5, seed=1)
    edges = edge_set(g)
    for row in walks:
        for a, b in zip(row[:-1], row[1:]):
            assert (int(a), int(b)) in edges


def test_walks_low_q_explores_more():
    path_edges = [(i, i + 1) for i in range(29)]
    g = ugraph(30, path_edges)
    far = generate_walks(g, n_walks=4, walk_length=12, q=0.05, seed=3)
    near = generate_walks(g, n_walks=4, walk_length=12, q=20.0, seed=3)
    unique_far = np.mean([np.unique(r).size for r in far])
    unique_near = np.mean([np.unique(r).size for r in near])
    assert unique_far > unique_near


def test_walks_stuck_node_repeats():
    g = from_edge_arrays(3, np.array([0, 1]), np.array([1, 0]), np.ones(2))
    walks = generate_walks(g, n_walks=1, walk_length=5, seed=0)
    assert np.all(walks[2] == 2)  # isolated node


# ---------------------------------------------------------------------------
# shallow embeddings


def test_node2vec_separates_cliques():
    g = two_cliques(8)
    emb = node2vec_embed(g, dim=16, n_walks=8, walk_length=20, window=5, epochs=3, seed=0)
    assert emb.shape == (16, 16)
    within, cross = [], []
    for i in range(16):
        for j in range(i + 1, 16):
            d = float(emb[i] @ emb[j])
            (within if (i < 8) == (j < 8) else cross).append(d)
    assert np.mean(within) > np.mean(cross)


def test_node2vec_deterministic():
    g = two_cliques(5)
    a = node2vec_embed(g, dim=8, n_walks=4, walk_length=12, window=4, epochs=2, seed=7)
    b = node2vec_embed(g, dim=8, n_walks=4, walk_length=12, window=4, epochs=2, seed=7)
    assert np.array_equal(a, b)


def test_embedding_dot_self_loop_is_squared_norm():
    g = ugraph(3, [(0, 1), (1, 2)], loops=True)
    emb = np.arange(6, dtype=np.float64).reshape(3, 2)
    dots = embedding_dot_per_edge(g, emb)
    src = g.edge_src()
    for e in range(g.n_edges):
        u, v = int(src[e]), int(g.col_idx[e])
        assert dots[e] == pytest.approx(float(emb[u] @ emb[v]), abs=1e-14)
        if u == v:
            assert dots[e] == pytest.approx(float((emb[u] ** 2).sum()), abs=1e-14)


# ---------------------------------------------------------------------------
# auxiliary models


def clique_task(seed=0):
    rng = np.random.default_rng(seed)
    g = two_cliques(8, loops=True)
    targets = np.array([0] * 8 + [1] * 8)
    x = rng.normal(scale=0.3, size=(16, 4))
    x[:8, 0] += 1.5
    x[8:, 1] += 1.5
    return g, x, targets


def test_auxiliary_learns_clique_membership():
    g, x, targets = clique_task()
    model = train_auxiliary(g, x, targets, seed=0, epochs=60, patience=15)
    feats = edge_attention_features(g, x, model)
    assert feats.shape == (g.n_edges, 8)
    from cellgat.edgefeat import aux_gat_forward
    from cellgat.numerics import tensor
    out = aux_gat_forward(None, g, tensor(x), model)
    pred = out.data.argmax(axis=1)
    assert (pred == targets).mean() == 1.0


def test_edge_attention_rows_normalise_per_node():
    g, x, targets = clique_task(1)
    model = train_auxiliary(g, x, targets, seed=1, epochs=10, patience=3)
    feats = edge_attention_features(g, x, model)
    src = g.edge_src()
    for h in range(8):
        sums = np.zeros(g.n_nodes)
        np.add.at(sums, src, feats[:, h])
        assert np.allclose(sums, 1.0, atol=1e-10)
    assert np.all(feats >= 0.0) and np.all(feats <= 1.0)


# ---------------------------------------------------------------------------
# assembly


def test_assemble_columns_and_standardisation():
    g, x, targets = clique_task(2)
    cm = train_auxiliary(g, x, targets, seed=2, epochs=8, patience=2)
    bm = train_auxiliary(g, x, (targets + 1) % 2, seed=3, epochs=8, patience=2)
    emb = node2vec_embed(g, dim=8, n_walks=3, walk_length=10, window=3, epochs=1, seed=0)
    feat, stats = assemble_edge_features(g, x, cm, bm, emb)
    assert feat.shape == (g.n_edges, 18)
    assert np.array_equal(feat[:, 0:8], edge_attention_features(g, x, cm))
    assert np.array_equal(feat[:, 8:16], edge_attention_features(g, x, bm))
    assert abs(feat[:, 16].mean()) < 1e-10 and abs(feat[:, 16].std() - 1.0) < 1e-10
    assert abs(feat[:, 17].mean()) < 1e-10 and abs(feat[:, 17].std() - 1.0) < 1e-10


def test_assemble_reuses_frozen_stats():
    g, x, targets = clique_task(3)
    cm = train_auxiliary(g, x, targets, seed=4, epochs=5, patience=2)
    bm = train_auxiliary(g, x, targets, seed=5, epochs=5, patience=2)
    emb = node2vec_embed(g, dim=8, n_walks=2, walk_length=8, window=3, epochs=1, seed=1)
    stats = EdgeFeatureStats(curvature_mean=1.0, curvature_std=2.0, dot_mean=0.5, dot_std=4.0)
    feat, back = assemble_edge_features(g, x, cm, bm, emb, stats=stats)
    assert back is stats
    from cellgat.edgefeat import forman_ricci as fr
    assert np.allclose(feat[:, 16], (fr(g) - 1.0) / 2.0, atol=1e-14)
    assert np.allclose(feat[:, 17], (embedding_dot_per_edge(g, emb) - 0.5) / 4.0, atol=1e-14)


def test_assemble_zero_variance_guard():
    # a plain ring: every edge has curvature 0, so the std guard must kick in
    edges = [(i, (i + 1) % 6) for i in range(6)]
    g = ugraph(6, edges, loops=True)
    rng = np.random.default_rng(6)
    x = rng.normal(size=(6, 3))
    targets = np.array([0, 0, 0, 1, 1, 1])
    cm = train_auxiliary(g, x, targets, seed=6, epochs=3, patience=1)
    bm = train_auxiliary(g, x, targets, seed=7, epochs=3, patience=1)
    emb = np.zeros((6, 4))
    feat, stats = assemble_edge_features(g, x, cm, bm, emb)
    assert stats.dot_std == 1.0
    assert np.all(np.isfinite(feat))
