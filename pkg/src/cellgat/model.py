"""The main node classifier and its checkpoint format.

Architecture: two multi-head attention layers over the cell graph produce a
64-dim trunk per node. In parallel, each node's incident edges form a set
whose 18-dim feature rows pass through a permutation-invariant encoder and a
learned rank-weighted aggregation into 8 dims. The two are concatenated and
classified by a dense layer over log-softmax.

Ablation switches: drop the set path entirely, replace the learned
rank weights with plain averaging, swap the attention encoder for a sum
pooled deep set, or freeze the rank weights at their uniform start.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nn
from .edgefeat import N_EDGE_FEATURES
from .errors import ConfigError, DataError
from .graph import SparseGraph
from .layers import (
    DeepSetParams,
    GatLayer,
    SetBatch,
    build_set_batch,
    deepset_encode,
    deepset_init,
    gat_forward,
    gat_layer_init,
    gcn_forward,
    glorot,
    rank_weighted_pool,
    set_encode,
    set_encoder_init,
)
from .numerics import Tensor, tensor

CHECKPOINT_MAGIC = b"CGT1"
ENCODER_KINDS = ("attention", "deepset")


@dataclass
class ModelConfig:
    in_dim: int
    n_classes: int
    d_max: int  # largest incident-edge set the rank weights must cover
    use_edge_features: bool = True
    averaged_aggregation: bool = False
    encoder_kind: str = "attention"
    freeze_rank_weights: bool = False
    feature_mask: np.ndarray = field(default_factory=lambda: np.ones(N_EDGE_FEATURES, dtype=bool))
    gat_hidden: int = 8
    gat_heads: int = 8
    set_dim: int = 8
    dropout: float = 0.5

    def __post_init__(self):
        self.feature_mask = np.asarray(self.feature_mask, dtype=bool)
        if self.feature_mask.shape != (N_EDGE_FEATURES,):
            raise ConfigError(f"feature_mask must have {N_EDGE_FEATURES} entries")
        if self.encoder_kind not in ENCODER_KINDS:
            raise ConfigError(f"encoder_kind must be one of {ENCODER_KINDS}")
        if self.d_max < 1:
            raise ConfigError("d_max must be positive")

    def to_text(self) -> str:
        mask = "".join("1" if b else "0" for b in self.feature_mask)
        items = {
            "in_dim": self.in_dim,
            "n_classes": self.n_classes,
            "d_max": self.d_max,
            "use_edge_features": int(self.use_edge_features),
            "averaged_aggregation": int(self.averaged_aggregation),
            "encoder_kind": self.encoder_kind,
            "freeze_rank_weights": int(self.freeze_rank_weights),
            "feature_mask": mask,
            "gat_hidden": self.gat_hidden,
            "gat_heads": self.gat_heads,
            "set_dim": self.set_dim,
            "dropout": repr(self.dropout),
        }
        return "".join(f"{k}={items[k]}\n" for k in sorted(items))

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kv = {}
        for lineno, line in enumerate(text.strip().splitlines(), 1):
            if "=" not in line:
                raise DataError(f"model config line {lineno}: expected key=value")
            key, _, val = line.partition("=")
            kv[key] = val
        try:
            return cls(
                in_dim=int(kv["in_dim"]),
                n_classes=int(kv["n_classes"]),
                d_max=int(kv["d_max"]),
                use_edge_features=bool(int(kv["use_edge_features"])),
                averaged_aggregation=bool(int(kv["averaged_aggregation"])),
                encoder_kind=kv["encoder_kind"],
                freeze_rank_weights=bool(int(kv["freeze_rank_weights"])),
                feature_mask=np.array([c == "1" for c in kv["feature_mask"]]),
                gat_hidden=int(kv["gat_hidden"]),
                gat_heads=int(kv["gat_heads"]),
                set_dim=int(kv["set_dim"]),
                dropout=float(kv["dropout"]),
            )
        except KeyError as exc:
            raise DataError(f"model config missing key {exc.args[0]!r}")


@dataclass
class EgatModel:
    cfg: ModelConfig
    gat1: GatLayer
    gat2: GatLayer
    dense_w: Tensor
    dense_b: Tensor
    rank_weights: Tensor | None = None
    set_encoder: object | None = None  # SetEncoderParams or DeepSetParams

    def parameters(self) -> list[Tensor]:
        out = self.gat1.parameters() + self.gat2.parameters() + [self.dense_w, self.dense_b]
        if self.cfg.use_edge_features:
            out += self.set_encoder.parameters()
            if (self.rank_weights is not None
                    and not self.cfg.freeze_rank_weights
                    and not self.cfg.averaged_aggregation):
                out.append(self.rank_weights)
        return out

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        items = []
        for li, layer in (("gat1", self.gat1), ("gat2", self.gat2)):
            for hi, head in enumerate(layer.heads):
                items.append((f"{li}.h{hi}.w", head.w))
                items.append((f"{li}.h{hi}.a", head.a))
        items.append(("dense.w", self.dense_w))
        items.append(("dense.b", self.dense_b))
        if self.cfg.use_edge_features:
            if self.rank_weights is not None:
                items.append(("rank_weights", self.rank_weights))
            enc = self.set_encoder
            if isinstance(enc, DeepSetParams):
                for name in ("phi1_w", "phi1_b", "phi2_w", "phi2_b",
                             "rho1_w", "rho1_b", "rho2_w", "rho2_b"):
                    items.append((f"enc.{name}", getattr(enc, name)))
            else:
                for hi in range(enc.n_heads):
                    items.append((f"enc.wq{hi}", enc.wq[hi]))
                    items.append((f"enc.wk{hi}", enc.wk[hi]))
                    items.append((f"enc.wv{hi}", enc.wv[hi]))
                for name in ("ln1_g", "ln1_b", "ff1_w", "ff1_b",
                             "ff2_w", "ff2_b", "ln2_g", "ln2_b"):
                    items.append((f"enc.{name}", getattr(enc, name)))
        return items


def egat_init(rng: np.random.Generator, cfg: ModelConfig) -> EgatModel:
    trunk = cfg.gat_hidden * cfg.gat_heads
    combined = trunk + (cfg.set_dim if cfg.use_edge_features else 0)
    model = EgatModel(
        cfg=cfg,
        gat1=gat_layer_init(rng, cfg.in_dim, cfg.gat_hidden, cfg.gat_heads, "concat"),
        gat2=gat_layer_init(rng, trunk, cfg.gat_hidden, cfg.gat_heads, "concat"),
        dense_w=glorot(rng, combined, cfg.n_classes),
        dense_b=tensor(np.zeros(cfg.n_classes), requires_grad=True),
    )
    if cfg.use_edge_features:
        if cfg.encoder_kind == "deepset":
            model.set_encoder = deepset_init(rng, N_EDGE_FEATURES, hidden=16, out_dim=cfg.set_dim)
        else:
            model.set_encoder = set_encoder_init(rng, N_EDGE_FEATURES, n_heads=2,
                                                 head_dim=cfg.set_dim // 2)
        model.rank_weights = tensor(
            np.full(cfg.d_max, 1.0 / cfg.d_max),
            requires_grad=not cfg.freeze_rank_weights,
        )
    return model


def build_node_sets(g: SparseGraph) -> tuple[SetBatch, np.ndarray]:
    """Per-node incident-edge sets in canonical order: ascending edge weight
    (a weight-0 self-loop sorts first), ties by neighbour id. Returns the
    batch and the item -> CSR edge id map."""
    src = g.edge_src()
    order = np.lexsort((g.col_idx, g.edge_weight, src))
    return build_set_batch(src[order], g.n_nodes), order


def egat_forward(
    tape,
    model: EgatModel,
    g: SparseGraph,
    x: Tensor,
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
    edge_mask: Tensor | None = None,
    feat_mask: Tensor | None = None,
    capture: dict | None = None,
) -> Tensor:
    """Log-probabilities for every node of g.

    edge_mask (E,) multiplies both the attention logits and the edge feature
    rows; feat_mask (in_dim,) multiplies input feature columns. Both exist
    for the explanation optimiser and default to no-ops.
    """
    cfg = model.cfg
    if cfg.use_edge_features and g.edge_feat is None:
        raise ConfigError("model expects a graph with edge features")
    if x.data.shape[1] != cfg.in_dim:
        raise ConfigError(f"expected {cfg.in_dim} input features, got {x.data.shape[1]}")
    h = x
    if feat_mask is not None:
        h = nn.scale_cols(tape, h, feat_mask)
    h = nn.dropout(tape, h, cfg.dropout, training, rng)
    h = gat_forward(tape, g, h, model.gat1, attn_dropout=cfg.dropout,
                    training=training, rng=rng, logit_mask=edge_mask, capture=capture)
    h = nn.dropout(tape, h, cfg.dropout, training, rng)
    h = gat_forward(tape, g, h, model.gat2, attn_dropout=cfg.dropout,
                    training=training, rng=rng, logit_mask=edge_mask)

    if cfg.use_edge_features:
        batch, order = build_node_sets(g)
        ef = tensor(g.edge_feat * cfg.feature_mask[None, :])
        if edge_mask is not None:
            ef = nn.scale_rows(tape, ef, edge_mask)
        items = nn.gather_rows(tape, ef, order)
        if capture is not None:
            capture["set_batch"] = batch
            capture["edge_order"] = order
        if cfg.encoder_kind == "deepset":
            set_out = deepset_encode(tape, batch, items, model.set_encoder)
        else:
            enc = set_encode(tape, batch, items, model.set_encoder, capture=capture)
            if cfg.averaged_aggregation:
                sizes = batch.set_sizes().astype(np.float64)
                w = tensor(1.0 / sizes[batch.set_ids])
                set_out = nn.segment_sum(tape, nn.scale_rows(tape, enc, w),
                                         batch.set_ids, batch.n_sets)
            else:
                set_out = rank_weighted_pool(tape, enc, batch, model.rank_weights)
        h = nn.concat_cols(tape, [h, set_out])

    h = nn.dropout(tape, h, cfg.dropout, training, rng)
    logits = nn.add(tape, nn.matmul(tape, h, model.dense_w), model.dense_b)
    return nn.log_softmax(tape, logits)


def predict(model: EgatModel, g: SparseGraph, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    out = egat_forward(None, model, g, tensor(np.asarray(x, dtype=np.float64)))
    return out.data.argmax(axis=1), out.data


# ---------------------------------------------------------------------------
# graph convolution baseline


@dataclass
class GcnModel:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    dropout: float

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]


def gcn_init(rng, in_dim: int, n_classes: int, hidden: int = 256, dropout: float = 0.5) -> GcnModel:
    return GcnModel(
        w1=glorot(rng, in_dim, hidden),
        b1=tensor(np.zeros(hidden), requires_grad=True),
        w2=glorot(rng, hidden, n_classes),
        b2=tensor(np.zeros(n_classes), requires_grad=True),
        dropout=dropout,
    )


def gcn_model_forward(tape, model: GcnModel, g: SparseGraph, x: Tensor, *,
                      training: bool = False, rng=None) -> Tensor:
    h = nn.dropout(tape, x, model.dropout, training, rng)
    h = nn.add(tape, gcn_forward(tape, g, h, model.w1), model.b1)
    h = nn.leaky_relu(tape, h, 0.0)
    h = nn.dropout(tape, h, model.dropout, training, rng)
    h = nn.add(tape, gcn_forward(tape, g, h, model.w2), model.b2)
    return nn.log_softmax(tape, h)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: EgatModel, path) -> None:
    """Binary checkpoint: magic, config text, then named float64 blobs.
    Round-trips bit-exactly."""
    named = model.named_parameters()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        cfg_bytes = model.cfg.to_text().encode("utf-8")
        fh.write(struct.pack("<I", len(cfg_bytes)))
        fh.write(cfg_bytes)
        fh.write(struct.pack("<I", len(named)))
        for name, t in named:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", t.data.ndim))
            for d in t.data.shape:
                fh.write(struct.pack("<q", d))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> EgatModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    buf = io.BytesIO(blob)
    if buf.read(4) != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a model checkpoint")

    def read_u32():
        raw = buf.read(4)
        if len(raw) != 4:
            raise DataError(f"{path}: truncated checkpoint")
        return struct.unpack("<I", raw)[0]

    cfg = ModelConfig.from_text(buf.read(read_u32()).decode("utf-8"))
    model = egat_init(np.random.default_rng(0), cfg)
    table = dict(model.named_parameters())
    n = read_u32()
    if n != len(table):
        raise DataError(f"{path}: expected {len(table)} parameters, found {n}")
    for _ in range(n):
        name = buf.read(read_u32()).decode("utf-8")
        if name not in table:
            raise DataError(f"{path}: unknown parameter {name!r}")
        ndim = read_u32()
        shape = tuple(struct.unpack("<q", buf.read(8))[0] for _ in range(ndim))
        want = table[name].data.shape
        if shape != want:
            raise DataError(f"{path}: parameter {name!r} has shape {shape}, expected {want}")
        count = int(np.prod(shape)) if shape else 1
        raw = buf.read(count * 8)
        if len(raw) != count * 8:
            raise DataError(f"{path}: truncated checkpoint")
        table[name].data = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    return model
