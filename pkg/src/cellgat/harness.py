"""Experiment orchestration: data preparation, training, trials, ablations.

prepare_data turns a labelled dataset plus a split into per-split graphs with
node features and the 18-column edge table (auxiliary models, curvature and
embedding statistics are fit on the training split only). train runs one
configuration on prepared data with partition-grouped minibatches and
early stopping on held-out loss; run_trials repeats it over seeds and
run_ablation_grid over named model variants.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import t as student_t

from . import numerics as nn
from .community import louvain
from .edgefeat import (
    EdgeFeatureStats,
    N_EDGE_FEATURES,
    assemble_edge_features,
    node2vec_embed,
    train_auxiliary,
)
from .errors import ConfigError, DataError, NumericalError
from .graph import (
    SparseGraph,
    add_self_loops,
    build_bbknn,
    from_edge_arrays,
    induced_subgraph,
    partition_graph,
    pca_fit_project,
)
from .ingest import CellDataset, SplitAssignment
from .model import (
    EgatModel,
    GcnModel,
    ModelConfig,
    egat_forward,
    egat_init,
    gcn_init,
    gcn_model_forward,
)
from .numerics import Adagrad, Tape, tensor

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MODEL_KINDS = ("egat", "gcn")


def full_feature_mask() -> np.ndarray:
    return np.ones(N_EDGE_FEATURES, dtype=bool)


def feature_mask_for(*column_ranges) -> np.ndarray:
    mask = np.zeros(N_EDGE_FEATURES, dtype=bool)
    for lo, hi in column_ranges:
        mask[lo:hi] = True
    return mask


@dataclass
class TrainConfig:
    """Everything one experiment run depends on. Serialises to canonical
    key=value text (sorted keys) and parses back losslessly."""

    # graph construction
    k_neighbors: int = 5
    pca_dim: int = 50
    resolution: float = 1.0
    # model
    model_kind: str = "egat"
    use_edge_features: bool = True
    averaged_aggregation: bool = False
    encoder_kind: str = "attention"
    freeze_rank_weights: bool = False
    feature_mask: np.ndarray = field(default_factory=full_feature_mask)
    gat_hidden: int = 8
    gat_heads: int = 8
    set_dim: int = 8
    gcn_hidden: int = 256
    dropout: float = 0.5
    # optimisation
    lr: float = 0.01
    weight_decay: float = 0.0005
    epochs: int = 200
    patience: int = 20
    batch_nodes: int = 256
    seed: int = 0
    seeds: tuple = (0, 1, 2)
    # edge feature budget
    n2v_dim: int = 64
    n2v_walks: int = 4
    n2v_length: int = 30
    n2v_window: int = 5
    n2v_epochs: int = 2
    aux_epochs: int = 150
    aux_patience: int = 20

    def __post_init__(self):
        self.feature_mask = np.asarray(self.feature_mask, dtype=bool)
        if self.feature_mask.shape != (N_EDGE_FEATURES,):
            raise ConfigError(f"feature_mask must have {N_EDGE_FEATURES} entries")
        if self.model_kind not in MODEL_KINDS:
            raise ConfigError(f"model_kind must be one of {MODEL_KINDS}")
        if self.epochs < 1 or self.k_neighbors < 1 or self.batch_nodes < 1:
            raise ConfigError("epochs, k_neighbors and batch_nodes must be positive")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError("dropout must be in [0, 1)")
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ConfigError("seeds must not be empty")

    _FLOATS = ("resolution", "dropout", "lr", "weight_decay")

    def to_text(self) -> str:
        lines = []
        for f_ in sorted(dataclasses.fields(self), key=lambda f_: f_.name):
            v = getattr(self, f_.name)
            if f_.name == "feature_mask":
                v = "".join("1" if b else "0" for b in v)
            elif f_.name == "seeds":
                v = ",".join(str(s) for s in v)
            elif f_.name in self._FLOATS:
                v = repr(float(v))
            elif isinstance(v, bool):
                v = int(v)
            lines.append(f"{f_.name}={v}\n")
        return "".join(lines)

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        known = {f_.name: f_ for f_ in dataclasses.fields(cls)}
        kw = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"config line {lineno}: expected key=value, got {line!r}")
            key, _, val = line.partition("=")
            key = key.strip()
            val = val.strip()
            if key not in known:
                raise ConfigError(f"config line {lineno}: unknown key {key!r}")
            if key == "feature_mask":
                if len(val) != N_EDGE_FEATURES or set(val) - {"0", "1"}:
                    raise ConfigError(f"config line {lineno}: feature_mask must be "
                                      f"{N_EDGE_FEATURES} characters of 0/1")
                kw[key] = np.array([c == "1" for c in val])
            elif key == "seeds":
                try:
                    kw[key] = tuple(int(s) for s in val.split(","))
                except ValueError:
                    raise ConfigError(f"config line {lineno}: bad seeds list {val!r}")
            elif key in cls._FLOATS:
                kw[key] = float(val)
            elif key in ("model_kind", "encoder_kind"):
                kw[key] = val
            elif key in ("use_edge_features", "averaged_aggregation", "freeze_rank_weights"):
                if val not in ("0", "1", "True", "False"):
                    raise ConfigError(f"config line {lineno}: expected 0/1 for {key!r}")
                kw[key] = val in ("1", "True")
            else:
                try:
                    kw[key] = int(val)
                except ValueError:
                    raise ConfigError(f"config line {lineno}: expected integer for {key!r}")
        return cls(**kw)


# ---------------------------------------------------------------------------
# data preparation


@dataclass
class PreparedData:
    graphs: dict[str, SparseGraph]  # split -> self-looped graph with edge features
    features: dict[str, np.ndarray]  # split -> nodes x in_dim
    labels: dict[str, np.ndarray]
    cell_ids: dict[str, np.ndarray]
    class_names: list[str]
    clusters: np.ndarray  # community id per training node
    stats: EdgeFeatureStats
    in_dim: int
    n_classes: int
    d_max: int


def _strip_loops(g: SparseGraph) -> SparseGraph:
    src = g.edge_src()
    keep = src != g.col_idx
    return from_edge_arrays(g.n_nodes, src[keep], g.col_idx[keep], g.edge_weight[keep])


def prepare_data(dataset: CellDataset, split: SplitAssignment, cfg: TrainConfig,
                 data_seed: int = 0) -> PreparedData:
    """Build per-split graphs, node features and edge feature tables.

    All fitting (PCA axes, communities, auxiliary models, standardisation
    statistics) happens on the training split; validation and test graphs
    only receive forward passes and frozen statistics. data_seed drives the
    preparation randomness and is independent of training seeds so one
    prepared dataset serves a whole trial sweep.
    """
    if dataset.labels is None:
        raise DataError("prepare_data requires a labelled dataset")
    batch_all = dataset.batch_ids()
    idx = {name: split.indices(name) for name in SPLITS}
    pca_d = min(cfg.pca_dim, idx["train"].size - 1, dataset.n_genes)
    pca, _ = pca_fit_project(dataset.counts[idx["train"]], pca_d)
    # Reduced coordinates serve graph construction and the auxiliary models;
    # the classifier itself sees the gene-level matrix, standardised below.
    coords = {name: pca.project(dataset.counts[idx[name]]) for name in SPLITS}
    mu = dataset.counts[idx["train"]].mean(axis=0)
    sd = dataset.counts[idx["train"]].std(axis=0)
    sd[sd < 1e-12] = 1.0
    feats = {name: (dataset.counts[idx[name]] - mu) / sd for name in SPLITS}
    raw = {
        name: build_bbknn(coords[name], batch_all[idx[name]], k=cfg.k_neighbors)
        for name in SPLITS
    }
    clusters = louvain(raw["train"], resolution=cfg.resolution, seed=data_seed).membership
    looped = {name: add_self_loops(raw[name]) for name in SPLITS}

    log.info("fitting auxiliary models on %d training cells", idx["train"].size)
    aux_cluster = train_auxiliary(
        looped["train"], coords["train"], clusters,
        seed=data_seed, epochs=cfg.aux_epochs, patience=cfg.aux_patience,
    )
    aux_batch = train_auxiliary(
        looped["train"], coords["train"], batch_all[idx["train"]],
        seed=data_seed + 1, epochs=cfg.aux_epochs, patience=cfg.aux_patience,
    )

    graphs: dict[str, SparseGraph] = {}
    stats: EdgeFeatureStats | None = None
    for name in SPLITS:
        emb = node2vec_embed(
            raw[name], dim=cfg.n2v_dim, n_walks=cfg.n2v_walks,
            walk_length=cfg.n2v_length, window=cfg.n2v_window,
            epochs=cfg.n2v_epochs, seed=data_seed,
        )
        table, stats = assemble_edge_features(
            looped[name], coords[name], aux_cluster, aux_batch, emb, stats=stats
        )
        graphs[name] = looped[name].with_edge_feat(table)

    return PreparedData(
        graphs=graphs,
        features=feats,
        labels={name: dataset.labels[idx[name]] for name in SPLITS},
        cell_ids={name: dataset.cell_meta["cell_id"][idx[name]] for name in SPLITS},
        class_names=list(dataset.class_names or []),
        clusters=clusters,
        stats=stats,
        in_dim=feats["train"].shape[1],
        n_classes=int(dataset.labels.max()) + 1,
        d_max=max(int(g.out_degrees().max()) for g in graphs.values()),
    )


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochStats:
    train_loss: float
    val_loss: float
    val_acc: float


@dataclass
class RunResult:
    variant: str
    seed: int
    history: list[EpochStats]
    best_epoch: int  # 1-based epoch whose parameters were kept
    val_acc: float
    test_loss: float
    test_acc: float
    confusion: np.ndarray  # true class x predicted class
    model: object

    @property
    def epochs_run(self) -> int:
        return len(self.history)


def nll_and_accuracy(log_probs: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    loss = float(-log_probs[np.arange(labels.size), labels].mean())
    acc = float((log_probs.argmax(axis=1) == labels).mean())
    return loss, acc


def confusion_matrix(pred: np.ndarray, labels: np.ndarray, n_classes: int) -> np.ndarray:
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (labels, pred), 1)
    return m


def _model_config(data: PreparedData, cfg: TrainConfig) -> ModelConfig:
    return ModelConfig(
        in_dim=data.in_dim,
        n_classes=data.n_classes,
        d_max=data.d_max,
        use_edge_features=cfg.use_edge_features,
        averaged_aggregation=cfg.averaged_aggregation,
        encoder_kind=cfg.encoder_kind,
        freeze_rank_weights=cfg.freeze_rank_weights,
        feature_mask=cfg.feature_mask,
        gat_hidden=cfg.gat_hidden,
        gat_heads=cfg.gat_heads,
        set_dim=cfg.set_dim,
        dropout=cfg.dropout,
    )


def _forward_fn(model, cfg: TrainConfig):
    if cfg.model_kind == "gcn":
        def fwd(tape, g, x, training, rng):
            return gcn_model_forward(tape, model, g, x, training=training, rng=rng)
    else:
        def fwd(tape, g, x, training, rng):
            return egat_forward(tape, model, g, x, training=training, rng=rng)
    return fwd


def _training_batches(data: PreparedData, cfg: TrainConfig):
    g = data.graphs["train"]
    n = g.n_nodes
    n_parts = max(1, n // cfg.batch_nodes)
    if n_parts == 1:
        blocks = [np.arange(n, dtype=np.int64)]
    else:
        pm = partition_graph(_strip_loops(g), n_parts, seed=cfg.seed)
        blocks = [pm.part_nodes(p) for p in range(pm.n_parts)]
    batches = []
    for nodes in blocks:
        sub, _ = induced_subgraph(g, nodes)
        batches.append((sub, tensor(data.features["train"][nodes]),
                        data.labels["train"][nodes]))
    return batches


def train(data: PreparedData, cfg: TrainConfig, variant: str = "full") -> RunResult:
    """One training run: partition-grouped minibatches over the training
    graph, full-graph validation each epoch, early stopping on held-out
    loss, best parameters restored before the test pass."""
    rng = np.random.default_rng(cfg.seed)
    if cfg.model_kind == "gcn":
        model: object = gcn_init(rng, data.in_dim, data.n_classes, cfg.gcn_hidden, cfg.dropout)
    else:
        model = egat_init(rng, _model_config(data, cfg))
    fwd = _forward_fn(model, cfg)
    params = model.parameters()
    lam = getattr(model, "rank_weights", None)
    if lam is not None and lam.requires_grad:
        # Adagrad's first step is +-lr per coordinate, which exceeds the
        # 1/d_max initial scale of the rank weights by two orders of
        # magnitude; give them a step size proportional to that scale.
        opts = [Adagrad([p for p in params if p is not lam],
                        lr=cfg.lr, weight_decay=cfg.weight_decay),
                Adagrad([lam], lr=cfg.lr / lam.data.size)]
    else:
        opts = [Adagrad(params, lr=cfg.lr, weight_decay=cfg.weight_decay)]
    batches = _training_batches(data, cfg)
    n_train = data.graphs["train"].n_nodes
    xval = tensor(data.features["val"])
    yval = data.labels["val"]

    history: list[EpochStats] = []
    best_loss, best_state, best_epoch, best_acc, bad = np.inf, None, 0, 0.0, 0
    for epoch in range(1, cfg.epochs + 1):
        total = 0.0
        for bi in rng.permutation(len(batches)):
            sub, xb, yb = batches[bi]
            tape = Tape()
            out = fwd(tape, sub, xb, True, rng)
            loss = nn.nll_loss(tape, out, yb)
            if not np.isfinite(loss.data):
                raise NumericalError(f"training diverged at epoch {epoch}")
            tape.backward(loss)
            for opt in opts:
                opt.step()
            total += float(loss.data) * yb.size
        val_out = fwd(None, data.graphs["val"], xval, False, None)
        val_loss, val_acc = nll_and_accuracy(val_out.data, yval)
        history.append(EpochStats(total / n_train, val_loss, val_acc))
        log.debug("epoch %d: train loss %.4f, val loss %.4f, val acc %.4f",
                  epoch, total / n_train, val_loss, val_acc)
        if val_loss < best_loss - 1e-6:
            best_loss, best_acc, best_epoch, bad = val_loss, val_acc, epoch, 0
            best_state = [p.data.copy() for p in params]
        else:
            bad += 1
            if bad > cfg.patience:
                break
    if best_state is not None:
        for p, d in zip(params, best_state):
            p.data = d.copy()

    test_out = fwd(None, data.graphs["test"], tensor(data.features["test"]), False, None)
    ytest = data.labels["test"]
    test_loss, test_acc = nll_and_accuracy(test_out.data, ytest)
    conf = confusion_matrix(test_out.data.argmax(axis=1), ytest, data.n_classes)
    log.info("run %s seed %d: best epoch %d/%d, val acc %.4f, test acc %.4f",
             variant, cfg.seed, best_epoch, len(history), best_acc, test_acc)
    return RunResult(variant, cfg.seed, history, best_epoch, best_acc,
                     test_loss, test_acc, conf, model)


# ---------------------------------------------------------------------------
# trials and ablations


def confidence_interval(values, level: float = 0.95) -> tuple[float, float]:
    """Mean and half-width of the Student-t interval (sample sd, n - 1 df).
    A single value has an undefined width, reported as nan."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ConfigError("confidence_interval needs at least one value")
    mean = float(v.mean())
    if v.size < 2:
        return mean, float("nan")
    sd = float(v.std(ddof=1))
    p = 0.5 + level / 2.0
    df = v.size - 1
    crit = float(student_t.ppf(p, df))
    # the ppf is only ~1e-10 accurate at low df; polish against the cdf
    for _ in range(2):
        crit -= (float(student_t.cdf(crit, df)) - p) / float(student_t.pdf(crit, df))
    return mean, crit * sd / np.sqrt(v.size)


def run_trials(data: PreparedData, cfg: TrainConfig, variant: str = "full",
               seeds=None) -> list[RunResult]:
    seeds = cfg.seeds if seeds is None else tuple(seeds)
    return [
        train(data, dataclasses.replace(cfg, seed=s), variant)
        for s in seeds
    ]


VARIANTS: dict[str, dict] = {
    "full": {},
    "gat": {"use_edge_features": False},
    "gcn": {"model_kind": "gcn"},
    "attn_cluster": {"feature_mask": feature_mask_for((0, 8))},
    "attn_batch": {"feature_mask": feature_mask_for((8, 16))},
    "curvature": {"feature_mask": feature_mask_for((16, 17))},
    "embedding": {"feature_mask": feature_mask_for((17, 18))},
    "cluster_batch": {"feature_mask": feature_mask_for((0, 16))},
    # the null check freezes the rank weights too, otherwise degree
    # information leaks through the aggregation of constant encodings
    "zero_mask": {"feature_mask": feature_mask_for(),
                  "freeze_rank_weights": True},
    "averaged": {"averaged_aggregation": True},
    "deepset": {"encoder_kind": "deepset"},
    "frozen_rank": {"freeze_rank_weights": True},
}


def variant_config(cfg: TrainConfig, name: str) -> TrainConfig:
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    return dataclasses.replace(cfg, **VARIANTS[name])


def run_ablation_grid(data: PreparedData, cfg: TrainConfig, variants=None,
                      seeds=None) -> dict[str, list[RunResult]]:
    variants = list(VARIANTS) if variants is None else list(variants)
    out = {}
    for name in variants:
        out[name] = run_trials(data, variant_config(cfg, name), name, seeds)
    return out


# ---------------------------------------------------------------------------
# reports


def write_metrics_csv(path, results_by_variant: dict[str, list[RunResult]]) -> None:
    """One row per run; float columns use repr so a rerun on identical inputs
    writes an identical file."""
    with open(path, "w") as fh:
        fh.write("variant,seed,best_epoch,epochs_run,val_acc,test_acc,test_loss\n")
        for name in results_by_variant:
            for r in results_by_variant[name]:
                fh.write(
                    f"{name},{r.seed},{r.best_epoch},{r.epochs_run},"
                    f"{r.val_acc!r},{r.test_acc!r},{r.test_loss!r}\n"
                )


def write_summary(path, results_by_variant: dict[str, list[RunResult]],
                  class_names=None) -> None:
    lines = ["variant            n  test_acc mean   ci95 half-width"]
    for name, runs in results_by_variant.items():
        mean, half = confidence_interval([r.test_acc for r in runs])
        half_text = f"{half:.4f}" if np.isfinite(half) else "n/a"
        lines.append(f"{name:<18} {len(runs):>2}  {mean:14.4f}   {half_text}")
    best = max(results_by_variant, key=lambda k: np.mean([r.test_acc for r in results_by_variant[k]]))
    lines.append(f"best variant: {best}")
    if class_names:
        lines.append("classes: " + ", ".join(class_names))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
