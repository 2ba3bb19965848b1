"""Per-edge feature construction.

Four families fill an 18-column table aligned with CSR edge order:
columns 0:8 first-layer attention of an auxiliary model trained to predict
community membership, 8:16 the same for batch membership, 16 edge curvature,
17 embedding dot products from shallow random-walk embeddings. The last two
are standardised with statistics frozen on the graph they were fit on.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import numerics as nn
from .errors import ConfigError, DataError, NumericalError
from .graph import SparseGraph
from .layers import GatLayer, gat_forward, gat_layer_init
from .numerics import Adagrad, Tensor, tensor

log = logging.getLogger(__name__)

N_EDGE_FEATURES = 18
ATTN_CLUSTER = slice(0, 8)
ATTN_BATCH = slice(8, 16)
COL_CURVATURE = 16
COL_EMBED_DOT = 17


# ---------------------------------------------------------------------------
# curvature


def forman_ricci(g: SparseGraph, use_weights: bool = True) -> np.ndarray:
    """Forman curvature per CSR edge (unit node weights).

    For an edge e=(u,v): 4 - sqrt(w_e) * (S_u + S_v), where S_x sums
    1/sqrt(w_e') over the real (non-loop) edges at x plus e itself. With
    unit weights this is the familiar 4 - deg(u) - deg(v); an isolated
    edge scores 2. A self-loop row is treated as a unit-weight edge from
    u to itself that no other edge sees: 4 - 2 * (S_u + 1).
    """
    w = np.asarray(g.edge_weight, dtype=np.float64)
    if not use_weights:
        w = np.ones_like(w)
    src = g.edge_src()
    dst = g.col_idx
    loops = src == dst
    if np.any(w[~loops] <= 0):
        raise DataError("curvature needs strictly positive edge weights")
    # incident sums over real edges only; each undirected edge appears once
    # per endpoint row in a symmetric graph
    s = np.zeros(g.n_nodes)
    np.add.at(s, src[~loops], 1.0 / np.sqrt(w[~loops]))
    ric = np.empty(g.n_edges)
    real = ~loops
    ric[real] = 4.0 - np.sqrt(w[real]) * (s[src[real]] + s[dst[real]])
    ric[loops] = 4.0 - 2.0 * (s[src[loops]] + 1.0)
    return ric


# ---------------------------------------------------------------------------
# random-walk embeddings


def generate_walks(
    g: SparseGraph,
    n_walks: int = 10,
    walk_length: int = 80,
    p: float = 1.0,
    q: float = 1.0,
    seed: int = 0,
) -> np.ndarray:
    """n_walks walks of walk_length nodes from every node. p penalises
    returning to the previous node, q penalises leaving its neighbourhood.
    Transitions ignore edge weights. Walks stuck at a degree-0 node repeat it.
    """
    if walk_length < 1 or n_walks < 1:
        raise ConfigError("walks need positive n_walks and walk_length")
    if p <= 0 or q <= 0:
        raise ConfigError("p and q must be positive")
    rng = np.random.default_rng(seed)
    starts = np.repeat(np.arange(g.n_nodes, dtype=np.int64), n_walks)
    walks = np.empty((starts.size, walk_length), dtype=np.int64)
    walks[:, 0] = starts
    ptr, col = g.row_ptr, g.col_idx
    deg = np.diff(ptr)
    if p == 1.0 and q == 1.0:
        for t in range(1, walk_length):
            cur = walks[:, t - 1]
            d = deg[cur]
            off = np.minimum((rng.random(cur.size) * d).astype(np.int64),
                             np.maximum(d - 1, 0))
            safe = np.where(d > 0, ptr[cur] + off, 0)
            walks[:, t] = np.where(d > 0, col[safe], cur)
        return walks
    for wi in range(starts.size):
        prev = -1
        cur = walks[wi, 0]
        for t in range(1, walk_length):
            nbrs = col[ptr[cur]:ptr[cur + 1]]
            if nbrs.size == 0:
                walks[wi, t] = cur
                continue
            weights = np.where(
                nbrs == prev,
                1.0 / p,
                np.where(_connected(g, prev, nbrs), 1.0, 1.0 / q),
            )
            probs = weights / weights.sum()
            nxt = int(rng.choice(nbrs, p=probs))
            walks[wi, t] = nxt
            prev, cur = cur, nxt
    return walks


def _connected(g: SparseGraph, u: int, candidates: np.ndarray) -> np.ndarray:
    if u < 0:
        return np.zeros(candidates.shape, dtype=bool)
    nbrs = g.neighbors(u)
    if nbrs.size == 0:
        return np.zeros(candidates.shape, dtype=bool)
    pos = np.minimum(np.searchsorted(nbrs, candidates), nbrs.size - 1)
    return nbrs[pos] == candidates


def _skipgram_pairs(walks: np.ndarray, window: int) -> np.ndarray:
    centers, contexts = [], []
    for d in range(1, window + 1):
        if d >= walks.shape[1]:
            break
        centers.append(walks[:, :-d].ravel())
        contexts.append(walks[:, d:].ravel())
        centers.append(walks[:, d:].ravel())
        contexts.append(walks[:, :-d].ravel())
    c = np.concatenate(centers)
    o = np.concatenate(contexts)
    keep = c != o
    return np.stack([c[keep], o[keep]], axis=1)


def node2vec_embed(
    g: SparseGraph,
    dim: int = 64,
    n_walks: int = 10,
    walk_length: int = 80,
    window: int = 10,
    p: float = 1.0,
    q: float = 1.0,
    n_negative: int = 5,
    epochs: int = 5,
    lr: float = 0.025,
    seed: int = 0,
    batch_size: int = 50_000,
) -> np.ndarray:
    """Skip-gram embeddings with negative sampling over random walks.

    Negatives are drawn uniformly over nodes. Returns the n_nodes x dim
    input-side embedding matrix.
    """
    walks = generate_walks(g, n_walks, walk_length, p, q, seed)
    pairs = _skipgram_pairs(walks, window)
    if pairs.size == 0:
        raise DataError("no skip-gram pairs; graph may be all isolated nodes")
    rng = np.random.default_rng(seed + 1)
    n = g.n_nodes
    emb = rng.uniform(-0.5 / dim, 0.5 / dim, (n, dim))
    ctx = np.zeros((n, dim))
    for _ in range(epochs):
        order = rng.permutation(pairs.shape[0])
        for lo in range(0, order.size, batch_size):
            sel = pairs[order[lo:lo + batch_size]]
            c, o = sel[:, 0], sel[:, 1]
            negs = rng.integers(0, n, (c.size, n_negative))
            u = emb[c]
            v = ctx[o]
            vn = ctx[negs]
            pos = expit((u * v).sum(axis=1))
            neg = expit(np.einsum("bd,bkd->bk", u, vn))
            gp = pos - 1.0  # d(-log sigma(s))/ds
            gu = gp[:, None] * v + np.einsum("bk,bkd->bd", neg, vn)
            np.add.at(emb, c, -lr * gu)
            np.add.at(ctx, o, -lr * gp[:, None] * u)
            np.add.at(ctx.reshape(-1, dim), negs.ravel(),
                      (-lr * neg[:, :, None] * u[:, None, :]).reshape(-1, dim))
    if not np.all(np.isfinite(emb)):
        raise NumericalError("embedding training diverged")
    return emb


def embedding_dot_per_edge(g: SparseGraph, emb: np.ndarray) -> np.ndarray:
    """Dot product of the endpoint embeddings for every CSR edge; a self-loop
    row gets the node's squared norm."""
    if emb.shape[0] != g.n_nodes:
        raise ConfigError("one embedding row per node required")
    src = g.edge_src()
    return np.einsum("ed,ed->e", emb[src], emb[g.col_idx])


# ---------------------------------------------------------------------------
# auxiliary attention models


@dataclass
class AuxGat:
    layer1: GatLayer
    layer2: GatLayer
    dropout: float

    def parameters(self) -> list[Tensor]:
        return self.layer1.parameters() + self.layer2.parameters()


def aux_gat_init(rng, in_dim: int, n_classes: int, hidden: int = 8, heads: int = 8,
                 dropout: float = 0.5) -> AuxGat:
    return AuxGat(
        layer1=gat_layer_init(rng, in_dim, hidden, heads, "concat"),
        layer2=gat_layer_init(rng, hidden * heads, n_classes, 1, "average"),
        dropout=dropout,
    )


def aux_gat_forward(tape, g: SparseGraph, x: Tensor, model: AuxGat, *,
                    training: bool = False, rng=None, capture: dict | None = None) -> Tensor:
    h = nn.dropout(tape, x, model.dropout, training, rng)
    h = gat_forward(tape, g, h, model.layer1, attn_dropout=model.dropout,
                    training=training, rng=rng, capture=capture)
    h = nn.dropout(tape, h, model.dropout, training, rng)
    h = gat_forward(tape, g, h, model.layer2, attn_dropout=model.dropout,
                    training=training, rng=rng)
    return nn.log_softmax(tape, h)


def train_auxiliary(
    g: SparseGraph,
    x: np.ndarray,
    targets: np.ndarray,
    *,
    seed: int = 0,
    epochs: int = 150,
    patience: int = 20,
    lr: float = 0.01,
    weight_decay: float = 5e-4,
    dropout: float = 0.5,
    val_frac: float = 0.15,
    hidden: int = 8,
    heads: int = 8,
) -> AuxGat:
    """Fit a two-layer attention classifier on one graph, early-stopping on
    held-out node loss and restoring the best parameters."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (g.n_nodes,):
        raise ConfigError("one target per node required")
    n_classes = int(targets.max()) + 1
    rng = np.random.default_rng(seed)
    model = aux_gat_init(rng, x.shape[1], n_classes, hidden, heads, dropout)
    params = model.parameters()
    opt = Adagrad(params, lr=lr, weight_decay=weight_decay)
    xt = tensor(x)

    perm = rng.permutation(g.n_nodes)
    n_val = max(1, int(round(val_frac * g.n_nodes)))
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    best_loss, best_state, bad = np.inf, None, 0
    for epoch in range(epochs):
        tape = nn.Tape()
        out = aux_gat_forward(tape, g, xt, model, training=True, rng=rng)
        loss = nn.nll_loss(tape, nn.gather_rows(tape, out, train_idx), targets[train_idx])
        if not np.isfinite(loss.data):
            raise NumericalError(f"auxiliary training diverged at epoch {epoch}")
        tape.backward(loss)
        opt.step()
        val_out = aux_gat_forward(None, g, xt, model)
        val_loss = float(-val_out.data[val_idx, targets[val_idx]].mean())
        if val_loss < best_loss - 1e-6:
            best_loss, bad = val_loss, 0
            best_state = [p.data.copy() for p in params]
        else:
            bad += 1
            if bad > patience:
                break
    if best_state is not None:
        for prm, data in zip(params, best_state):
            prm.data = data
    log.info("auxiliary model: best held-out loss %.4f after %d epochs", best_loss, epoch + 1)
    return model


def edge_attention_features(g: SparseGraph, x: np.ndarray, model: AuxGat) -> np.ndarray:
    """First-layer attention per edge, one column per head, evaluation mode."""
    cap: dict = {}
    aux_gat_forward(None, g, tensor(x), model, capture=cap)
    return np.stack(cap["attention"], axis=1)


# ---------------------------------------------------------------------------
# assembly


@dataclass
class EdgeFeatureStats:
    """Standardisation constants frozen on the graph the models were fit on."""

    curvature_mean: float
    curvature_std: float
    dot_mean: float
    dot_std: float


def _std_or_one(v: np.ndarray) -> float:
    s = float(v.std())
    return s if s > 1e-12 else 1.0


def assemble_edge_features(
    g: SparseGraph,
    x: np.ndarray,
    cluster_model: AuxGat,
    batch_model: AuxGat,
    embedding: np.ndarray,
    stats: EdgeFeatureStats | None = None,
) -> tuple[np.ndarray, EdgeFeatureStats]:
    """Build the E x 18 edge feature table for one graph.

    When stats is None the curvature and embedding-dot columns are
    standardised with this graph's own statistics, which are returned for
    reuse on other graphs.
    """
    attn_c = edge_attention_features(g, x, cluster_model)
    attn_b = edge_attention_features(g, x, batch_model)
    if attn_c.shape[1] != 8 or attn_b.shape[1] != 8:
        raise ConfigError("auxiliary models must have 8 first-layer heads")
    ric = forman_ricci(g)
    dots = embedding_dot_per_edge(g, embedding)
    if stats is None:
        stats = EdgeFeatureStats(
            curvature_mean=float(ric.mean()),
            curvature_std=_std_or_one(ric),
            dot_mean=float(dots.mean()),
            dot_std=_std_or_one(dots),
        )
    feat = np.empty((g.n_edges, N_EDGE_FEATURES))
    feat[:, ATTN_CLUSTER] = attn_c
    feat[:, ATTN_BATCH] = attn_b
    feat[:, COL_CURVATURE] = (ric - stats.curvature_mean) / stats.curvature_std
    feat[:, COL_EMBED_DOT] = (dots - stats.dot_mean) / stats.dot_std
    return feat, stats
