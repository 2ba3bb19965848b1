"""Post-hoc model interpretation.

Three views of a trained classifier: per-edge weights distilled from the set
encoder's attention, a global input-feature ranking from the first
attention layer's weight matrices, and a per-node mask optimiser that finds
a compact subgraph and feature subset preserving the model's prediction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nn
from .errors import ConfigError, NumericalError
from .graph import SparseGraph, induced_subgraph, write_graph
from .model import EgatModel, build_node_sets, egat_forward
from .numerics import Adagrad, Tape, Tensor, tensor


def attention_adjacency(model: EgatModel, g: SparseGraph) -> np.ndarray:
    """Per-edge scalar weight from the set encoder's attention.

    Each edge's feature row is one item of its source node's set; the weight
    is the mean, over encoder heads and over the set's query items, of the
    attention that row receives. Weights are in [0, 1] and sum to 1 within
    each node's set, so they form a stochastic adjacency reweighting.
    """
    cfg = model.cfg
    if not cfg.use_edge_features or cfg.encoder_kind != "attention":
        raise ConfigError("attention weights need the attention set encoder")
    if g.edge_feat is None:
        raise ConfigError("graph has no edge features")
    from .layers import set_encode

    batch, order = build_node_sets(g)
    ef = tensor(g.edge_feat * cfg.feature_mask[None, :])
    items = nn.gather_rows(None, ef, order)
    cap: dict = {}
    set_encode(None, batch, items, model.set_encoder, capture=cap)
    received = np.zeros(batch.n_items)
    for att in cap["pair_attention"]:
        np.add.at(received, batch.pair_k, att)
    sizes = batch.set_sizes().astype(np.float64)
    received /= len(cap["pair_attention"]) * sizes[batch.set_ids]
    out = np.empty(g.n_edges)
    out[order] = received
    return out


def per_head_saliency(model: EgatModel) -> np.ndarray:
    """Input-feature scores per first-layer head: L2 norms of each head's
    weight rows. The aggregation across heads is a matter of convention;
    this exposes the raw per-head view. Shape (n_heads, in_dim)."""
    return np.stack([np.linalg.norm(h.w.data, axis=1) for h in model.gat1.heads])


def feature_saliency(model: EgatModel, top_k: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Top input features by the L2 row norm of the head-averaged first-layer
    weight matrix. Ties break toward the lower feature index; top_k larger
    than the feature count is clipped. Returns (indices, their scores)."""
    wbar = np.mean([h.w.data for h in model.gat1.heads], axis=0)
    scores = np.linalg.norm(wbar, axis=1)
    order = np.lexsort((np.arange(scores.size), -scores))
    top = order[: min(top_k, scores.size)]
    return top, scores[top]


def masked_log_probs(
    model: EgatModel,
    g: SparseGraph,
    x: np.ndarray,
    edge_mask: np.ndarray | None = None,
    feat_mask: np.ndarray | None = None,
) -> np.ndarray:
    """Evaluation-mode log-probabilities under multiplicative masks.
    All-ones masks reproduce the unmasked forward pass exactly."""
    em = None if edge_mask is None else tensor(np.asarray(edge_mask, dtype=np.float64))
    fm = None if feat_mask is None else tensor(np.asarray(feat_mask, dtype=np.float64))
    out = egat_forward(None, model, g, tensor(np.asarray(x, dtype=np.float64)),
                       edge_mask=em, feat_mask=fm)
    return out.data


def neighborhood_nodes(g: SparseGraph, node: int, hops: int = 2) -> np.ndarray:
    """Sorted node ids within the given hop count of node (inclusive)."""
    seen = {int(node)}
    frontier = [int(node)]
    for _ in range(hops):
        nxt = []
        for u in frontier:
            for v in g.neighbors(u).tolist():
                if v not in seen:
                    seen.add(v)
                    nxt.append(v)
        frontier = nxt
    return np.array(sorted(seen), dtype=np.int64)


@dataclass
class Explanation:
    node: int
    predicted_class: int
    nodes: np.ndarray  # computation subgraph, original node ids
    edge_src: np.ndarray  # original ids, aligned with edge_mask
    edge_dst: np.ndarray
    edge_mask: np.ndarray  # in [0, 1]
    feature_mask: np.ndarray  # in [0, 1], one per input feature
    retention: float  # probability of the original class under the masks
    objective: np.ndarray  # optimiser objective per step

    def top_features(self, k: int = 5) -> np.ndarray:
        order = np.lexsort((np.arange(self.feature_mask.size), -self.feature_mask))
        return order[: min(k, self.feature_mask.size)]

    def top_edges(self, k: int = 5) -> list[tuple[int, int, float]]:
        order = np.lexsort((np.arange(self.edge_mask.size), -self.edge_mask))
        return [
            (int(self.edge_src[e]), int(self.edge_dst[e]), float(self.edge_mask[e]))
            for e in order[: min(k, self.edge_mask.size)]
        ]


def _binary_entropy(tape, m: Tensor) -> Tensor:
    one_minus = nn.add_const(tape, nn.scale(tape, m, -1.0), 1.0)
    terms = nn.add(tape, nn.mul(tape, m, nn.log(tape, m)),
                   nn.mul(tape, one_minus, nn.log(tape, one_minus)))
    return nn.mean_all(tape, nn.scale(tape, terms, -1.0))


def explain_node(
    model: EgatModel,
    g: SparseGraph,
    x: np.ndarray,
    node: int,
    *,
    steps: int = 200,
    lr: float = 0.05,
    lambda_size: float = 0.005,
    lambda_ent: float = 0.1,
    seed: int = 0,
) -> Explanation:
    """Optimise sigmoid-parameterised edge and feature masks that keep the
    model's prediction at `node` while shrinking toward a sparse, binary
    explanation.

    The edge mask lives on the node's 2-hop computation subgraph and scales
    both attention logits and edge feature rows; the feature mask scales
    input columns. Objective: NLL of the originally predicted class, plus
    lambda_size times the mean mask value, plus lambda_ent times the mean
    binary mask entropy. Adagrad keeps the step size usable across mask
    sizes where a fixed-rate descent would stall on the regulariser terms.
    """
    if not 0 <= node < g.n_nodes:
        raise ConfigError(f"node {node} out of range for {g.n_nodes} nodes")
    if steps < 1:
        raise ConfigError("steps must be positive")
    nodes = neighborhood_nodes(g, node, 2)
    sub, old2new = induced_subgraph(g, nodes)
    row = int(old2new[node])
    xs = np.asarray(x, dtype=np.float64)[nodes]
    xt = tensor(xs)
    base = egat_forward(None, model, sub, xt)
    cls = int(base.data[row].argmax())

    rng = np.random.default_rng(seed)
    le = tensor(rng.normal(0.0, 0.05, sub.n_edges), requires_grad=True)
    lf = tensor(rng.normal(0.0, 0.05, model.cfg.in_dim), requires_grad=True)
    opt = Adagrad([le, lf], lr=lr)
    # freeze model weights so the tape only differentiates the masks
    saved = [(p, p.requires_grad) for p in model.parameters()]
    for p, _ in saved:
        p.requires_grad = False
    objective = np.empty(steps)
    try:
        for step in range(steps):
            tape = Tape()
            me = nn.sigmoid(tape, le)
            mf = nn.sigmoid(tape, lf)
            out = egat_forward(tape, model, sub, xt, edge_mask=me, feat_mask=mf)
            fit = nn.nll_loss(tape, nn.gather_rows(tape, out, np.array([row])),
                              np.array([cls]))
            size = nn.add(tape, nn.mean_all(tape, me), nn.mean_all(tape, mf))
            ent = nn.add(tape, _binary_entropy(tape, me), _binary_entropy(tape, mf))
            obj = nn.add(tape, fit, nn.add(tape, nn.scale(tape, size, lambda_size),
                                           nn.scale(tape, ent, lambda_ent)))
            if not np.isfinite(obj.data):
                raise NumericalError(
                    f"explanation objective became non-finite at step {step} "
                    f"(node {node}, lr {lr})"
                )
            objective[step] = float(obj.data)
            tape.backward(obj)
            opt.step()
    finally:
        for p, flag in saved:
            p.requires_grad = flag

    def _sigmoid(v):
        return np.where(v >= 0, 1.0 / (1.0 + np.exp(-v)), np.exp(v) / (1.0 + np.exp(v)))

    edge_mask = _sigmoid(le.data)
    feat_mask = _sigmoid(lf.data)
    final = masked_log_probs(model, sub, xs, edge_mask, feat_mask)
    src = sub.edge_src()
    return Explanation(
        node=int(node),
        predicted_class=cls,
        nodes=nodes,
        edge_src=nodes[src],
        edge_dst=nodes[sub.col_idx],
        edge_mask=edge_mask,
        feature_mask=feat_mask,
        retention=float(np.exp(final[row, cls])),
        objective=objective,
    )


def export_embedding_inputs(out_dir, g: SparseGraph, weights: np.ndarray,
                            metadata: dict[str, np.ndarray]) -> dict[str, Path]:
    """Write a reweighted edge list plus a per-node metadata table, the two
    inputs an external manifold-learning step needs. Returns the paths."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (g.n_edges,):
        raise ConfigError(f"need one weight per edge, got {weights.shape}")
    for key, col in metadata.items():
        if len(col) != g.n_nodes:
            raise ConfigError(f"metadata column {key!r} has {len(col)} rows "
                              f"for {g.n_nodes} nodes")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    edges_path = out / "attention_edges.txt"
    nodes_path = out / "nodes.csv"
    write_graph(SparseGraph(g.n_nodes, g.row_ptr, g.col_idx, weights), edges_path)
    keys = list(metadata)
    with open(nodes_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node"] + keys)
        for i in range(g.n_nodes):
            writer.writerow([i] + [metadata[k][i] for k in keys])
    return {"edges": edges_path, "nodes": nodes_path}
