"""Community detection by greedy modularity optimisation.

Modularity follows the adjacency-matrix convention throughout: k_i is the
row sum of A, 2m is the total sum of A, and a self-loop contributes its
weight once to A_ii. With no self-loops this matches the usual undirected
definition.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .graph import SparseGraph

log = logging.getLogger(__name__)

MIN_GAIN = 1e-12


@dataclass
class Partition:
    """Result of a community detection run."""

    membership: np.ndarray  # node -> community id, contiguous from 0
    modularity: float
    resolution: float
    pass_modularity: list[float]  # modularity after each aggregation pass

    @property
    def n_communities(self) -> int:
        return int(self.membership.max()) + 1 if self.membership.size else 0

    def groups(self) -> list[np.ndarray]:
        return [np.nonzero(self.membership == c)[0] for c in range(self.n_communities)]


def _edge_weights(g: SparseGraph, use_weights: bool) -> np.ndarray:
    if use_weights:
        return np.asarray(g.edge_weight, dtype=np.float64)
    return np.ones(g.n_edges, dtype=np.float64)


def modularity(g: SparseGraph, membership, resolution: float = 1.0, use_weights: bool = False) -> float:
    membership = np.asarray(membership, dtype=np.int64)
    if membership.shape != (g.n_nodes,):
        raise ConfigError("membership must assign every node a community")
    w = _edge_weights(g, use_weights)
    m2 = float(w.sum())
    if m2 <= 0:
        raise DataError("modularity undefined for a graph with no edge weight")
    src = np.repeat(np.arange(g.n_nodes), np.diff(g.row_ptr))
    same = membership[src] == membership[g.col_idx]
    within = float(w[same].sum())
    k = np.zeros(g.n_nodes)
    np.add.at(k, src, w)
    totals = np.zeros(int(membership.max()) + 1)
    np.add.at(totals, membership, k)
    return within / m2 - resolution * float(np.sum((totals / m2) ** 2))


def _to_adjacency(g: SparseGraph, use_weights: bool):
    """Per-node neighbour dicts and self-weights (A_ii, counted once)."""
    w = _edge_weights(g, use_weights)
    adj: list[dict[int, float]] = [dict() for _ in range(g.n_nodes)]
    self_w = np.zeros(g.n_nodes)
    for u in range(g.n_nodes):
        lo, hi = g.row_ptr[u], g.row_ptr[u + 1]
        for e in range(lo, hi):
            v = int(g.col_idx[e])
            if v == u:
                self_w[u] += w[e]
            else:
                adj[u][v] = adj[u].get(v, 0.0) + w[e]
    return adj, self_w


def _working_modularity(adj, self_w, k, comm, m2, resolution) -> float:
    within = float(self_w.sum())
    for u, nbrs in enumerate(adj):
        cu = comm[u]
        for v, w in nbrs.items():
            if comm[v] == cu:
                within += w
    totals: dict[int, float] = {}
    for u in range(len(adj)):
        totals[comm[u]] = totals.get(comm[u], 0.0) + k[u]
    return within / m2 - resolution * sum((t / m2) ** 2 for t in totals.values())


def louvain(
    g: SparseGraph,
    resolution: float = 1.0,
    seed: int = 0,
    use_weights: bool = False,
) -> Partition:
    """Two-phase greedy optimisation: sweep local single-node moves until no
    move improves modularity by more than MIN_GAIN, aggregate communities
    into supernodes, repeat. Node order is reshuffled every sweep from the
    seeded generator, so results are reproducible per seed.
    """
    if g.n_edges == 0:
        raise DataError("community detection needs at least one edge")
    rng = np.random.default_rng(seed)
    adj, self_w = _to_adjacency(g, use_weights)
    n = g.n_nodes
    k = np.array([self_w[u] + sum(adj[u].values()) for u in range(n)])
    m2 = float(k.sum())
    if m2 <= 0:
        raise DataError("total edge weight must be positive")

    membership = np.arange(g.n_nodes, dtype=np.int64)  # original node -> community
    pass_modularity: list[float] = []
    prev_q = -np.inf

    while True:
        comm = np.arange(n, dtype=np.int64)
        sigma_tot = k.copy()  # indexed by community id of this level
        moved_any = False
        improved = True
        while improved:
            improved = False
            order = rng.permutation(n)
            for u in order:
                cu = int(comm[u])
                # weight from u to each neighbouring community
                links: dict[int, float] = {cu: 0.0}
                for v, w in adj[u].items():
                    cv = int(comm[v])
                    links[cv] = links.get(cv, 0.0) + w
                sigma_tot[cu] -= k[u]

                def gain(c):
                    # half the true modularity delta; halving preserves argmax
                    return links.get(c, 0.0) / m2 - resolution * sigma_tot[c] * k[u] / (m2 * m2)

                best_c, best_g = cu, gain(cu)
                for c in sorted(links):
                    if c == cu:
                        continue
                    gc = gain(c)
                    if gc > best_g + MIN_GAIN:
                        best_c, best_g = c, gc
                sigma_tot[best_c] += k[u]
                if best_c != cu:
                    comm[u] = best_c
                    improved = True
                    moved_any = True

        q = _working_modularity(adj, self_w, k, comm, m2, resolution)
        if not moved_any or q <= prev_q + MIN_GAIN:
            if not pass_modularity:
                pass_modularity.append(q)
            break
        prev_q = q
        pass_modularity.append(q)

        # aggregate: one supernode per community
        labels = {c: i for i, c in enumerate(sorted(set(comm.tolist())))}
        n_new = len(labels)
        new_adj: list[dict[int, float]] = [dict() for _ in range(n_new)]
        new_self = np.zeros(n_new)
        for u in range(n):
            cu = labels[int(comm[u])]
            new_self[cu] += self_w[u]
            for v, w in adj[u].items():
                cv = labels[int(comm[v])]
                if cv == cu:
                    new_self[cu] += w  # both directions land here: ordered-pair sum
                else:
                    new_adj[cu][cv] = new_adj[cu].get(cv, 0.0) + w
        membership = np.array([labels[int(comm[c])] for c in membership], dtype=np.int64)
        adj, self_w, n = new_adj, new_self, n_new
        k = np.array([self_w[u] + sum(adj[u].values()) for u in range(n)])

    # fold the final level's communities into the node mapping
    final = {c: i for i, c in enumerate(sorted(set(comm.tolist())))}
    membership = np.array([final[int(comm[c])] for c in membership], dtype=np.int64)
    # relabel by first appearance so ids are stable under node order
    order = {}
    for c in membership:
        if int(c) not in order:
            order[int(c)] = len(order)
    membership = np.array([order[int(c)] for c in membership], dtype=np.int64)
    q_final = modularity(g, membership, resolution, use_weights)
    log.info("community detection: %d communities, Q=%.4f, %d passes",
             int(membership.max()) + 1, q_final, len(pass_modularity))
    return Partition(membership, q_final, resolution, pass_modularity)
