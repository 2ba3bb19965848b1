"""Neural building blocks: graph attention, graph convolution, and two
permutation-invariant set encoders over ragged item batches.

Everything here is a pure function over (tape, tensors); parameters live in
small dataclasses created by the matching *_init function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nn
from .errors import ConfigError
from .graph import SparseGraph
from .numerics import Tensor, tensor

LEAKY_SLOPE = 0.2


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return tensor(rng.uniform(-limit, limit, shape), requires_grad=True)


def affine(tape, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return nn.add(tape, nn.matmul(tape, x, w), b)


# ---------------------------------------------------------------------------
# graph attention


@dataclass
class GatHead:
    w: Tensor  # in_dim x out_dim
    a: Tensor  # (2 * out_dim, 1); zero-initialised so training starts from mean aggregation


@dataclass
class GatLayer:
    heads: list[GatHead]
    head_mode: str  # "concat" (per-head ELU, column concat) or "average" (plain mean)
    out_dim: int

    def parameters(self) -> list[Tensor]:
        out = []
        for h in self.heads:
            out.extend([h.w, h.a])
        return out


def gat_layer_init(rng, in_dim: int, out_dim: int, n_heads: int, head_mode: str = "concat") -> GatLayer:
    if head_mode not in ("concat", "average"):
        raise ConfigError(f"unknown head_mode {head_mode!r}")
    heads = [
        GatHead(glorot(rng, in_dim, out_dim), tensor(np.zeros((2 * out_dim, 1)), requires_grad=True))
        for _ in range(n_heads)
    ]
    return GatLayer(heads, head_mode, out_dim)


def gat_forward(
    tape,
    g: SparseGraph,
    h: Tensor,
    layer: GatLayer,
    *,
    attn_dropout: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
    logit_mask: Tensor | None = None,
    capture: dict | None = None,
) -> Tensor:
    """One multi-head attention pass. g must hold a self-loop on every node so
    no attention softmax is empty. The per-edge logit for center i and
    neighbour j decomposes as a1.(W h_i) + a2.(W h_j) before the leaky ReLU.

    logit_mask, when given, multiplies the pre-softmax logits edgewise.
    capture, when given, receives per-head attention coefficients under
    "attention" (list of (E,) arrays, detached).
    """
    src = g.edge_src()
    dst = g.col_idx
    f = layer.out_dim
    head_outs = []
    for head in layer.heads:
        hw = nn.matmul(tape, h, head.w)
        s1 = nn.matmul(tape, hw, nn.narrow(tape, head.a, 0, f))
        s2 = nn.matmul(tape, hw, nn.narrow(tape, head.a, f, 2 * f))
        e = nn.add(tape, nn.gather_rows(tape, s1, src), nn.gather_rows(tape, s2, dst))
        e = nn.leaky_relu(tape, e, LEAKY_SLOPE)
        if logit_mask is not None:
            e = nn.scale_rows(tape, e, logit_mask)
        alpha = nn.segment_softmax(tape, e, src, g.n_nodes)
        if capture is not None:
            capture.setdefault("attention", []).append(alpha.data[:, 0].copy())
        if attn_dropout > 0.0:
            alpha = nn.dropout(tape, alpha, attn_dropout, training, rng)
        msg = nn.gather_rows(tape, hw, dst)
        msg = nn.scale_rows(tape, msg, nn.reshape(tape, alpha, (alpha.data.shape[0],)))
        head_outs.append(nn.segment_sum(tape, msg, src, g.n_nodes))
    if layer.head_mode == "concat":
        return nn.concat_cols(tape, [nn.elu(tape, o) for o in head_outs])
    acc = head_outs[0]
    for o in head_outs[1:]:
        acc = nn.add(tape, acc, o)
    return nn.scale(tape, acc, 1.0 / len(head_outs))


# ---------------------------------------------------------------------------
# graph convolution (baseline)


def gcn_forward(tape, g: SparseGraph, h: Tensor, w: Tensor) -> Tensor:
    """Symmetrically normalised convolution over the binary adjacency;
    expects self-loops present and a symmetric neighbourhood structure."""
    deg = g.out_degrees().astype(np.float64)
    if np.any(deg == 0):
        raise ConfigError("gcn_forward needs self-loops (found isolated row)")
    src = g.edge_src()
    dst = g.col_idx
    coef = tensor(1.0 / np.sqrt(deg[src] * deg[dst]))
    hw = nn.matmul(tape, h, w)
    msg = nn.scale_rows(tape, nn.gather_rows(tape, hw, dst), coef)
    return nn.segment_sum(tape, msg, src, g.n_nodes)


# ---------------------------------------------------------------------------
# ragged set batches


@dataclass
class SetBatch:
    """Flattened ragged sets. Item rows must be set-major: all items of set 0,
    then set 1, and so on, each set already in its canonical order."""

    set_ids: np.ndarray  # item -> owning set
    ranks: np.ndarray  # item -> position within its set
    pair_q: np.ndarray  # all within-set (query, key) pairs
    pair_k: np.ndarray
    n_sets: int
    n_items: int

    def set_sizes(self) -> np.ndarray:
        return np.bincount(self.set_ids, minlength=self.n_sets)


def build_set_batch(set_ids: np.ndarray, n_sets: int | None = None) -> SetBatch:
    set_ids = np.asarray(set_ids, dtype=np.int64)
    if set_ids.ndim != 1:
        raise ConfigError("set_ids must be 1-D")
    if set_ids.size and np.any(np.diff(set_ids) < 0):
        raise ConfigError("set_ids must be non-decreasing (set-major layout)")
    if n_sets is None:
        n_sets = int(set_ids.max()) + 1 if set_ids.size else 0
    counts = np.bincount(set_ids, minlength=n_sets)
    starts = np.concatenate([[0], np.cumsum(counts)])
    ranks = np.arange(set_ids.size, dtype=np.int64) - starts[set_ids]
    qs, ks = [], []
    for s in range(n_sets):
        idx = np.arange(starts[s], starts[s + 1], dtype=np.int64)
        if idx.size == 0:
            continue
        qq, kk = np.meshgrid(idx, idx, indexing="ij")
        qs.append(qq.ravel())
        ks.append(kk.ravel())
    pair_q = np.concatenate(qs) if qs else np.empty(0, dtype=np.int64)
    pair_k = np.concatenate(ks) if ks else np.empty(0, dtype=np.int64)
    return SetBatch(set_ids, ranks, pair_q, pair_k, int(n_sets), int(set_ids.size))


# ---------------------------------------------------------------------------
# set transformer style encoder


@dataclass
class SetEncoderParams:
    wq: list[Tensor]
    wk: list[Tensor]
    wv: list[Tensor]
    ln1_g: Tensor
    ln1_b: Tensor
    ff1_w: Tensor
    ff1_b: Tensor
    ff2_w: Tensor
    ff2_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    head_dim: int

    @property
    def n_heads(self) -> int:
        return len(self.wq)

    @property
    def model_dim(self) -> int:
        return self.n_heads * self.head_dim

    def parameters(self) -> list[Tensor]:
        return [
            *self.wq, *self.wk, *self.wv,
            self.ln1_g, self.ln1_b,
            self.ff1_w, self.ff1_b, self.ff2_w, self.ff2_b,
            self.ln2_g, self.ln2_b,
        ]


def set_encoder_init(rng, in_dim: int, n_heads: int = 2, head_dim: int = 4, ff_hidden: int = 16) -> SetEncoderParams:
    d = n_heads * head_dim
    return SetEncoderParams(
        wq=[glorot(rng, in_dim, head_dim) for _ in range(n_heads)],
        wk=[glorot(rng, in_dim, head_dim) for _ in range(n_heads)],
        wv=[glorot(rng, in_dim, head_dim) for _ in range(n_heads)],
        ln1_g=tensor(np.ones(d), requires_grad=True),
        ln1_b=tensor(np.zeros(d), requires_grad=True),
        ff1_w=glorot(rng, d, ff_hidden),
        ff1_b=tensor(np.zeros(ff_hidden), requires_grad=True),
        ff2_w=glorot(rng, ff_hidden, d),
        ff2_b=tensor(np.zeros(d), requires_grad=True),
        ln2_g=tensor(np.ones(d), requires_grad=True),
        ln2_b=tensor(np.zeros(d), requires_grad=True),
        head_dim=head_dim,
    )


def set_encode(tape, batch: SetBatch, x: Tensor, p: SetEncoderParams, capture: dict | None = None) -> Tensor:
    """Self-attention within each set; one output row per item.

    The attention residual adds the concatenated per-head query projections
    rather than the raw input, which carries the input into the model width
    when the two differ. Scores use the usual 1/sqrt(head_dim) scaling.
    """
    if x.data.shape[0] != batch.n_items:
        raise ConfigError("item count mismatch between batch and features")
    inv = 1.0 / math.sqrt(p.head_dim)
    heads, queries = [], []
    for wq, wk, wv in zip(p.wq, p.wk, p.wv):
        q = nn.matmul(tape, x, wq)
        k = nn.matmul(tape, x, wk)
        v = nn.matmul(tape, x, wv)
        lq = nn.gather_rows(tape, q, batch.pair_q)
        lk = nn.gather_rows(tape, k, batch.pair_k)
        logits = nn.scale(tape, nn.sum_rows(tape, nn.mul(tape, lq, lk)), inv)
        att = nn.segment_softmax(tape, logits, batch.pair_q, batch.n_items)
        if capture is not None:
            capture.setdefault("pair_attention", []).append(att.data.copy())
        msg = nn.scale_rows(tape, nn.gather_rows(tape, v, batch.pair_k), att)
        heads.append(nn.segment_sum(tape, msg, batch.pair_q, batch.n_items))
        queries.append(q)
    mh = nn.concat_cols(tape, heads)
    qc = nn.concat_cols(tape, queries)
    x1 = nn.layer_norm(tape, nn.add(tape, qc, mh), p.ln1_g, p.ln1_b)
    hid = nn.leaky_relu(tape, affine(tape, x1, p.ff1_w, p.ff1_b), 0.0)
    ff = affine(tape, hid, p.ff2_w, p.ff2_b)
    return nn.layer_norm(tape, nn.add(tape, x1, ff), p.ln2_g, p.ln2_b)


def rank_weighted_pool(tape, items: Tensor, batch: SetBatch, lam: Tensor) -> Tensor:
    """Sum item rows within each set, scaling the rank-r item by lam[r]."""
    if lam.data.ndim != 1:
        raise ConfigError("lam must be 1-D")
    if batch.n_items and batch.ranks.max() >= lam.data.shape[0]:
        raise ConfigError("a set is larger than the rank weight table")
    w = nn.gather_rows(tape, lam, batch.ranks)
    return nn.segment_sum(tape, nn.scale_rows(tape, items, w), batch.set_ids, batch.n_sets)


# ---------------------------------------------------------------------------
# deep set encoder (ablation alternative)


@dataclass
class DeepSetParams:
    phi1_w: Tensor
    phi1_b: Tensor
    phi2_w: Tensor
    phi2_b: Tensor
    rho1_w: Tensor
    rho1_b: Tensor
    rho2_w: Tensor
    rho2_b: Tensor

    def parameters(self) -> list[Tensor]:
        return [
            self.phi1_w, self.phi1_b, self.phi2_w, self.phi2_b,
            self.rho1_w, self.rho1_b, self.rho2_w, self.rho2_b,
        ]


def deepset_init(rng, in_dim: int, hidden: int = 16, out_dim: int = 8) -> DeepSetParams:
    return DeepSetParams(
        phi1_w=glorot(rng, in_dim, hidden),
        phi1_b=tensor(np.zeros(hidden), requires_grad=True),
        phi2_w=glorot(rng, hidden, out_dim),
        phi2_b=tensor(np.zeros(out_dim), requires_grad=True),
        rho1_w=glorot(rng, out_dim, hidden),
        rho1_b=tensor(np.zeros(hidden), requires_grad=True),
        rho2_w=glorot(rng, hidden, out_dim),
        rho2_b=tensor(np.zeros(out_dim), requires_grad=True),
    )


def deepset_encode(tape, batch: SetBatch, x: Tensor, p: DeepSetParams) -> Tensor:
    """phi per item, sum-pool per set (in given item order), rho per set.
    Returns one row per set."""
    h = nn.leaky_relu(tape, affine(tape, x, p.phi1_w, p.phi1_b), 0.0)
    h = affine(tape, h, p.phi2_w, p.phi2_b)
    pooled = nn.segment_sum(tape, h, batch.set_ids, batch.n_sets)
    r = nn.leaky_relu(tape, affine(tape, pooled, p.rho1_w, p.rho1_b), 0.0)
    return affine(tape, r, p.rho2_w, p.rho2_b)
