"""CSR graphs and the geometry around them.

Covers the graph container used by every model, exact batch-balanced kNN
construction, PCA projection (deterministic eigendecomposition), a multilevel
partitioner for minibatching, and a plain-text edge-list format whose floats
round-trip bit-exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError


class SparseGraph:
    """Directed graph in CSR form; row i lists the neighbourhood of node i.

    Column indices are sorted and unique within each row. ``edge_weight`` is
    per directed edge; ``edge_feat`` is an optional |E| x F float64 table
    aligned with CSR edge order.
    """

    __slots__ = ("n_nodes", "row_ptr", "col_idx", "edge_weight", "edge_feat")

    def __init__(self, n_nodes, row_ptr, col_idx, edge_weight, edge_feat=None, validate=True):
        self.n_nodes = int(n_nodes)
        self.row_ptr = np.asarray(row_ptr, dtype=np.int64)
        self.col_idx = np.asarray(col_idx, dtype=np.int64)
        self.edge_weight = np.asarray(edge_weight, dtype=np.float64)
        self.edge_feat = None if edge_feat is None else np.asarray(edge_feat, dtype=np.float64)
        if validate:
            self._validate()

    def _validate(self) -> None:
        if self.row_ptr.shape != (self.n_nodes + 1,):
            raise ValueError("row_ptr must have length n_nodes + 1")
        if self.row_ptr[0] != 0 or np.any(np.diff(self.row_ptr) < 0):
            raise ValueError("row_ptr must be non-decreasing and start at 0")
        m = self.n_edges
        if self.row_ptr[-1] != m or self.col_idx.shape != (m,) or self.edge_weight.shape != (m,):
            raise ValueError("row_ptr, col_idx and edge_weight disagree on edge count")
        if m and (self.col_idx.min() < 0 or self.col_idx.max() >= self.n_nodes):
            raise ValueError("col_idx out of range")
        # sorted + unique within each row
        starts = self.row_ptr[:-1]
        inner = np.ones(m, dtype=bool)
        if m:
            inner[starts[starts < m]] = False
            if np.any(self.col_idx[inner] <= self.col_idx[np.nonzero(inner)[0] - 1]):
                raise ValueError("col_idx must be sorted and unique within each row")
        if self.edge_feat is not None and (self.edge_feat.ndim != 2 or self.edge_feat.shape[0] != m):
            raise ValueError("edge_feat must be 2-D with one row per edge")

    @property
    def n_edges(self) -> int:
        return int(self.col_idx.shape[0])

    def edge_src(self) -> np.ndarray:
        """Source (row) node id for every CSR edge."""
        return np.repeat(np.arange(self.n_nodes, dtype=np.int64), np.diff(self.row_ptr))

    def out_degrees(self) -> np.ndarray:
        return np.diff(self.row_ptr)

    def neighbors(self, i: int) -> np.ndarray:
        return self.col_idx[self.row_ptr[i]:self.row_ptr[i + 1]]

    def edge_ids(self, i: int) -> np.ndarray:
        return np.arange(self.row_ptr[i], self.row_ptr[i + 1], dtype=np.int64)

    def is_symmetric(self) -> bool:
        src = self.edge_src()
        fwd = set(zip(src.tolist(), self.col_idx.tolist()))
        return all((v, u) in fwd for u, v in fwd)

    def with_edge_feat(self, feat: np.ndarray) -> "SparseGraph":
        return SparseGraph(self.n_nodes, self.row_ptr, self.col_idx, self.edge_weight, feat)


def from_edge_arrays(n_nodes, src, dst, weight, feat=None) -> SparseGraph:
    """Build a CSR graph from parallel edge arrays; duplicates are rejected."""
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    weight = np.asarray(weight, dtype=np.float64)
    if src.shape != dst.shape or src.shape != weight.shape:
        raise ValueError("src, dst and weight must have identical shapes")
    if src.size and (min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= n_nodes):
        raise IndexError("edge endpoint out of range")
    order = np.lexsort((dst, src))
    src, dst, weight = src[order], dst[order], weight[order]
    if feat is not None:
        feat = np.asarray(feat, dtype=np.float64)[order]
    if src.size > 1 and np.any((np.diff(src) == 0) & (np.diff(dst) == 0)):
        raise ValueError("duplicate (src, dst) pair")
    row_ptr = np.zeros(n_nodes + 1, dtype=np.int64)
    np.add.at(row_ptr, src + 1, 1)
    row_ptr = np.cumsum(row_ptr)
    return SparseGraph(n_nodes, row_ptr, dst, weight, feat)


def symmetrize(g: SparseGraph) -> SparseGraph:
    """Union of each edge with its reverse; a pair present both ways keeps the
    mean of the two stored weights (identical weights stay bit-identical)."""
    src = g.edge_src()
    directed = {
        (int(u), int(v)): float(w)
        for u, v, w in zip(src, g.col_idx, g.edge_weight)
    }
    out_s, out_d, out_w = [], [], []
    for (u, v) in sorted({(min(u, v), max(u, v)) for (u, v) in directed}):
        ws = [directed[d] for d in ((u, v), (v, u)) if d in directed]
        w = ws[0] if len(ws) == 1 else (ws[0] + ws[1]) / 2.0
        out_s.append(u)
        out_d.append(v)
        out_w.append(w)
        if u != v:
            out_s.append(v)
            out_d.append(u)
            out_w.append(w)
    return from_edge_arrays(g.n_nodes, out_s, out_d, out_w)


def add_self_loops(g: SparseGraph, weight: float = 0.0) -> SparseGraph:
    """Insert an (i, i) edge for every node; rejects graphs that already
    have any self-loop or carry edge features (features are built after)."""
    if g.edge_feat is not None:
        raise ValueError("add_self_loops before attaching edge features")
    src = g.edge_src()
    if np.any(src == g.col_idx):
        raise ValueError("graph already has self-loops")
    loops = np.arange(g.n_nodes, dtype=np.int64)
    return from_edge_arrays(
        g.n_nodes,
        np.concatenate([src, loops]),
        np.concatenate([g.col_idx, loops]),
        np.concatenate([g.edge_weight, np.full(g.n_nodes, weight)]),
    )


def induced_subgraph(g: SparseGraph, nodes) -> tuple[SparseGraph, np.ndarray]:
    """Subgraph on the given (unique) node ids.

    Returns the subgraph (edge weights and features carried over) and an
    old->new id map of length n_nodes with -1 for absent nodes.
    """
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.size and (nodes.min() < 0 or nodes.max() >= g.n_nodes):
        raise IndexError("node id out of range")
    if np.unique(nodes).size != nodes.size:
        raise ValueError("node ids must be unique")
    old2new = np.full(g.n_nodes, -1, dtype=np.int64)
    old2new[nodes] = np.arange(nodes.size)
    src = g.edge_src()
    keep = (old2new[src] >= 0) & (old2new[g.col_idx] >= 0)
    feat = g.edge_feat[keep] if g.edge_feat is not None else None
    sub = from_edge_arrays(
        nodes.size, old2new[src[keep]], old2new[g.col_idx[keep]], g.edge_weight[keep], feat
    )
    return sub, old2new


# ---------------------------------------------------------------------------
# plain-text edge-list format


def write_graph(g: SparseGraph, path) -> None:
    """Write `nodes=<n> edges=<m> efeat=<F>` then one `src dst weight [f...]`
    line per edge. Floats use repr, which round-trips float64 exactly."""
    f_dim = 0 if g.edge_feat is None else g.edge_feat.shape[1]
    src = g.edge_src()
    with open(path, "w") as fh:
        fh.write(f"nodes={g.n_nodes} edges={g.n_edges} efeat={f_dim}\n")
        for e in range(g.n_edges):
            parts = [str(src[e]), str(g.col_idx[e]), repr(float(g.edge_weight[e]))]
            if f_dim:
                parts.extend(repr(float(v)) for v in g.edge_feat[e])
            fh.write(" ".join(parts) + "\n")


def read_graph(path) -> SparseGraph:
    with open(path) as fh:
        header = fh.readline()
        try:
            fields = dict(part.split("=") for part in header.split())
            n = int(fields["nodes"])
            m = int(fields["edges"])
            f_dim = int(fields["efeat"])
        except (ValueError, KeyError):
            raise DataError(f"{path}: line 1: malformed graph header: {header.strip()!r}")
        src = np.empty(m, dtype=np.int64)
        dst = np.empty(m, dtype=np.int64)
        weight = np.empty(m, dtype=np.float64)
        feat = np.empty((m, f_dim), dtype=np.float64) if f_dim else None
        for e in range(m):
            line = fh.readline()
            lineno = e + 2
            if not line:
                raise DataError(f"{path}: line {lineno}: expected {m} edges, file truncated")
            parts = line.split()
            if len(parts) != 3 + f_dim:
                raise DataError(
                    f"{path}: line {lineno}: expected {3 + f_dim} fields, got {len(parts)}"
                )
            try:
                src[e] = int(parts[0])
                dst[e] = int(parts[1])
                weight[e] = float(parts[2])
                if f_dim:
                    feat[e] = [float(v) for v in parts[3:]]
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}")
        if fh.readline().strip():
            raise DataError(f"{path}: line {m + 2}: trailing content after {m} edges")
    try:
        return from_edge_arrays(n, src, dst, weight, feat)
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: invalid graph: {exc}")


# ---------------------------------------------------------------------------
# PCA


@dataclass
class PcaModel:
    """Mean and principal axes fit on one matrix, applicable to another."""

    mean: np.ndarray
    components: np.ndarray  # genes x d, orthonormal columns
    explained_variance: np.ndarray  # length d, non-increasing

    def project(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.mean.shape[0]:
            raise ValueError("matrix width does not match the fitted feature count")
        return (x - self.mean) @ self.components


def pca_fit_project(x: np.ndarray, d: int | None = None) -> tuple[PcaModel, np.ndarray]:
    """Fit PCA by eigendecomposition of the covariance matrix and project x.

    Deterministic: eigenvectors come from numpy's symmetric solver and each
    component's sign is fixed so its largest-magnitude loading is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("pca_fit_project expects a 2-D matrix")
    n, g = x.shape
    if d is None:
        d = min(50, n - 1, g)
    if d < 1 or d > min(n, g):
        raise ConfigError(f"pca dimension {d} invalid for a {n} x {g} matrix")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(n - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    take = np.arange(g - 1, g - 1 - d, -1)  # eigh returns ascending order
    comps = evecs[:, take].copy()
    var = np.maximum(evals[take], 0.0)
    for j in range(d):
        k = int(np.argmax(np.abs(comps[:, j])))
        if comps[k, j] < 0:
            comps[:, j] = -comps[:, j]
    return PcaModel(mean, comps, var), xc @ comps


# ---------------------------------------------------------------------------
# batch-balanced kNN


def build_bbknn(coords, batch_ids, k: int = 3, symmetric: bool = True) -> SparseGraph:
    """Exact batch-balanced kNN graph on Euclidean distances.

    Every node gets directed edges to its min(k, available) nearest
    neighbours within each batch, self excluded, distance ties broken by
    smaller node index. Edge weight is the distance. With ``symmetric`` the
    result is the union with reversed edges (the default used everywhere);
    pass False to inspect the raw directed stage.
    """
    coords = np.asarray(coords, dtype=np.float64)
    batch_ids = np.asarray(batch_ids)
    n = coords.shape[0]
    if coords.ndim != 2:
        raise ValueError("coords must be 2-D")
    if batch_ids.shape != (n,):
        raise ValueError("batch_ids must be 1-D matching coords rows")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    uniq = np.unique(batch_ids)
    src_all, dst_all, w_all = [], [], []
    for b in uniq:
        members = np.nonzero(batch_ids == b)[0]
        mcoords = coords[members]
        # keep the (chunk x |batch| x dim) distance workspace near 64 MB
        per_row = max(1, members.size * coords.shape[1] * 8)
        chunk = int(np.clip(64_000_000 // per_row, 16, n))
        for lo in range(0, n, chunk):
            hi = min(n, lo + chunk)
            diff = coords[lo:hi, None, :] - mcoords[None, :, :]
            dist = np.sqrt(np.sum(diff * diff, axis=-1))
            for r in range(hi - lo):
                i = lo + r
                row = dist[r]
                self_pos = np.nonzero(members == i)[0]
                avail = members.size - self_pos.size
                kk = min(k, avail)
                if kk == 0:
                    continue
                if self_pos.size:
                    row = row.copy()
                    row[self_pos[0]] = np.inf
                order = np.lexsort((members, row))[:kk]
                src_all.append(np.full(kk, i, dtype=np.int64))
                dst_all.append(members[order])
                w_all.append(row[order])
    if src_all:
        src = np.concatenate(src_all)
        dst = np.concatenate(dst_all)
        w = np.concatenate(w_all)
    else:
        src = dst = np.empty(0, dtype=np.int64)
        w = np.empty(0, dtype=np.float64)
    g = from_edge_arrays(n, src, dst, w)
    return symmetrize(g) if symmetric else g


# ---------------------------------------------------------------------------
# partitioning


@dataclass
class PartitionMap:
    """Assignment of every node to one of n_parts non-empty parts."""

    parts: np.ndarray
    n_parts: int

    def part_nodes(self, p: int) -> np.ndarray:
        return np.nonzero(self.parts == p)[0]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.parts, minlength=self.n_parts)


def edge_cut(g: SparseGraph, parts: np.ndarray) -> int:
    """Number of undirected edges whose endpoints land in different parts."""
    src = g.edge_src()
    cross = parts[src] != parts[g.col_idx]
    return int(np.count_nonzero(cross) // 2)


def partition_graph(g: SparseGraph, n_parts: int, seed: int = 0) -> PartitionMap:
    """Multilevel partitioning: matching-based coarsening to <= 2 * n_parts
    super-nodes, greedy balanced assignment, one cut-reducing refinement
    pass, then rebalancing to the size bound ceil(1.3 * n / n_parts).

    Operates on connectivity only (edge weights are distances here, where a
    heavy edge means dissimilar endpoints).
    """
    n = g.n_nodes
    if not 1 <= n_parts <= n:
        raise ConfigError(f"n_parts must be in [1, {n}], got {n_parts}")
    bound = math.ceil(1.3 * n / n_parts)
    rng = np.random.default_rng(seed)

    # adjacency sets at the current level
    adj = [set(g.neighbors(i).tolist()) - {i} for i in range(n)]
    weights = np.ones(n, dtype=np.int64)
    fine_to_coarse = np.arange(n, dtype=np.int64)
    cap = max(1, n // n_parts)

    cur = n
    while cur > 2 * n_parts:
        matched = np.full(cur, -1, dtype=np.int64)
        order = rng.permutation(cur)
        merges = 0
        for u in order:
            if matched[u] >= 0:
                continue
            best = -1
            for v in sorted(adj[u]):
                if matched[v] < 0 and weights[u] + weights[v] <= cap:
                    best = v
                    break
            if best >= 0:
                matched[u] = best
                matched[best] = u
                merges += 1
            else:
                matched[u] = u
        if merges == 0:
            break
        # contract matched pairs
        coarse_id = np.full(cur, -1, dtype=np.int64)
        nxt = 0
        for u in range(cur):
            if coarse_id[u] >= 0:
                continue
            coarse_id[u] = nxt
            if matched[u] != u:
                coarse_id[matched[u]] = nxt
            nxt += 1
        new_adj = [set() for _ in range(nxt)]
        new_w = np.zeros(nxt, dtype=np.int64)
        for u in range(cur):
            cu = coarse_id[u]
            new_w[cu] += weights[u]
            for v in adj[u]:
                cv = coarse_id[v]
                if cu != cv:
                    new_adj[cu].add(cv)
        adj = new_adj
        weights = new_w
        fine_to_coarse = coarse_id[fine_to_coarse]
        cur = nxt

    # greedy balanced assignment of super-nodes, heaviest first
    order = sorted(range(cur), key=lambda u: (-weights[u], u))
    load = np.zeros(n_parts, dtype=np.int64)
    super_part = np.full(cur, -1, dtype=np.int64)
    for u in order:
        p = int(np.argmin(load))
        super_part[u] = p
        load[p] += weights[u]
    parts = super_part[fine_to_coarse]

    # one refinement pass at the finest level
    sizes = np.bincount(parts, minlength=n_parts)
    for u in rng.permutation(n):
        own = parts[u]
        if sizes[own] <= 1:
            continue
        nbr_parts = parts[g.neighbors(u)]
        nbr_parts = nbr_parts[g.neighbors(u) != u]
        if nbr_parts.size == 0:
            continue
        counts = np.bincount(nbr_parts, minlength=n_parts)
        internal = counts[own]
        cand = int(np.argmax(counts))
        if cand != own and counts[cand] > internal and sizes[cand] + 1 <= bound:
            parts[u] = cand
            sizes[own] -= 1
            sizes[cand] += 1

    # enforce the size bound exactly (unit node weights make this trivial)
    while True:
        over = np.nonzero(sizes > bound)[0]
        if over.size == 0:
            break
        p = int(over[0])
        u = int(np.nonzero(parts == p)[0][0])
        q = int(np.argmin(sizes))
        parts[u] = q
        sizes[p] -= 1
        sizes[q] += 1

    return PartitionMap(parts.astype(np.int64), n_parts)
