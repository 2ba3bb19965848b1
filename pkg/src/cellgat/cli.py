"""Command-line pipeline around the library.

Subcommands cover the full path from raw count matrices to trained models,
ablation grids and per-node explanations. Outputs are plain text tables and
PNG figures written into --out. Exit codes: 0 success, 1 generic failure,
2 bad configuration, 3 bad input data, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .community import louvain
from .edgefeat import assemble_edge_features, node2vec_embed, train_auxiliary
from .errors import CellgatError, ConfigError, DataError
from .graph import add_self_loops, build_bbknn, pca_fit_project, read_graph, write_graph
from .harness import (
    PreparedData,
    TrainConfig,
    VARIANTS,
    confusion_matrix,
    nll_and_accuracy,
    prepare_data,
    run_ablation_grid,
    run_trials,
    write_metrics_csv,
    write_summary,
)
from .ingest import (
    SyntheticSpec,
    derive_labels_organoid,
    derive_labels_patient,
    filter_and_normalize,
    generate_synthetic,
    load_dataset_dir,
    save_dataset,
    split_70_15_15,
)
from .interpret import attention_adjacency, explain_node, export_embedding_inputs
from .model import egat_forward, load_checkpoint, predict, save_checkpoint
from .numerics import tensor
from .plots import (
    plot_ablation_accuracy,
    plot_confusion,
    plot_explanation,
    plot_loss_curves,
)

log = logging.getLogger(__name__)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> TrainConfig:
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        return TrainConfig.from_text(path.read_text())
    return TrainConfig()


def _labelled_dataset(args):
    d = load_dataset_dir(args.data)
    if d.labels is None:
        raise DataError(f"{args.data}: no labels.csv; run preprocess with a "
                        "label scheme or provide one")
    return d


def _prepared(args, cfg) -> PreparedData:
    d = _labelled_dataset(args)
    split = split_70_15_15(d, seed=args.seed)
    return prepare_data(d, split, cfg, data_seed=args.seed)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    out = _out_dir(args)
    spec = SyntheticSpec(
        n_cells=args.cells, n_genes=args.genes, n_clusters=args.clusters,
        n_batches=args.batches, n_classes=args.classes,
        signal_strength=args.signal, batch_effect=args.batch_effect,
        seed=args.seed,
    )
    dataset, truth = generate_synthetic(spec)
    save_dataset(dataset, out)
    with open(out / "signal_genes.txt", "w") as fh:
        for c in sorted(truth.signal_genes):
            for gi in truth.signal_genes[c]:
                fh.write(f"{c} {gi} {dataset.gene_names[gi]}\n")
    log.info("wrote %d cells x %d genes to %s", spec.n_cells, spec.n_genes, out)
    return 0


def cmd_preprocess(args) -> int:
    out = _out_dir(args)
    d = load_dataset_dir(args.data)
    d = filter_and_normalize(d, args.min_cells_per_gene, args.min_genes_per_cell)
    if args.label_scheme == "organoid":
        d = derive_labels_organoid(d, viral_threshold=args.viral_threshold)
    elif args.label_scheme == "patient":
        d = derive_labels_patient(d)
    save_dataset(d, out)
    log.info("kept %d cells x %d genes", d.n_cells, d.n_genes)
    return 0


def cmd_build_graph(args) -> int:
    out = _out_dir(args)
    cfg = _config(args)
    d = load_dataset_dir(args.data)
    dim = min(cfg.pca_dim, d.n_cells - 1, d.n_genes)
    _, coords = pca_fit_project(d.counts, dim)
    g = build_bbknn(coords, d.batch_ids(), k=cfg.k_neighbors)
    write_graph(g, out / "graph.txt")
    with open(out / "coords.csv", "w") as fh:
        fh.write("node,cell_id," + ",".join(f"c{i}" for i in range(dim)) + "\n")
        for i in range(d.n_cells):
            row = ",".join(repr(float(v)) for v in coords[i])
            fh.write(f"{i},{d.cell_meta['cell_id'][i]},{row}\n")
    log.info("graph: %d nodes, %d edges", g.n_nodes, g.n_edges)
    return 0


def cmd_cluster(args) -> int:
    out = _out_dir(args)
    g = read_graph(args.graph)
    part = louvain(g, resolution=args.resolution, seed=args.seed,
                   use_weights=args.use_weights)
    with open(out / "clusters.csv", "w") as fh:
        fh.write("node,community\n")
        for i, c in enumerate(part.membership):
            fh.write(f"{i},{c}\n")
    log.info("%d communities, modularity %.6f", part.n_communities, part.modularity)
    print(f"communities={part.n_communities} modularity={part.modularity!r}")
    return 0


def cmd_edgefeat(args) -> int:
    out = _out_dir(args)
    cfg = _config(args)
    d = load_dataset_dir(args.data)
    g = read_graph(args.graph)
    if g.n_nodes != d.n_cells:
        raise DataError(f"graph has {g.n_nodes} nodes for {d.n_cells} cells")
    dim = min(cfg.pca_dim, d.n_cells - 1, d.n_genes)
    _, coords = pca_fit_project(d.counts, dim)
    clusters = louvain(g, resolution=cfg.resolution, seed=args.seed).membership
    looped = add_self_loops(g)
    aux_cluster = train_auxiliary(looped, coords, clusters, seed=args.seed,
                                  epochs=cfg.aux_epochs, patience=cfg.aux_patience)
    aux_batch = train_auxiliary(looped, coords, d.batch_ids(), seed=args.seed + 1,
                                epochs=cfg.aux_epochs, patience=cfg.aux_patience)
    emb = node2vec_embed(g, dim=cfg.n2v_dim, n_walks=cfg.n2v_walks,
                         walk_length=cfg.n2v_length, window=cfg.n2v_window,
                         epochs=cfg.n2v_epochs, seed=args.seed)
    table, stats = assemble_edge_features(looped, coords, aux_cluster, aux_batch, emb)
    write_graph(looped.with_edge_feat(table), out / "graph_feat.txt")
    with open(out / "feature_stats.txt", "w") as fh:
        fh.write(f"curvature_mean={stats.curvature_mean!r}\n"
                 f"curvature_std={stats.curvature_std!r}\n"
                 f"dot_mean={stats.dot_mean!r}\n"
                 f"dot_std={stats.dot_std!r}\n")
    log.info("edge feature table: %d edges x %d columns", *table.shape)
    return 0


def _write_history(path, runs) -> None:
    with open(path, "w") as fh:
        fh.write("variant,seed,epoch,train_loss,val_loss,val_acc\n")
        for r in runs:
            for i, e in enumerate(r.history, 1):
                fh.write(f"{r.variant},{r.seed},{i},{e.train_loss!r},"
                         f"{e.val_loss!r},{e.val_acc!r}\n")


def cmd_train(args) -> int:
    out = _out_dir(args)
    cfg = _config(args)
    data = _prepared(args, cfg)
    name = "full" if cfg.model_kind == "egat" else cfg.model_kind
    runs = run_trials(data, cfg, variant=name)
    best = max(runs, key=lambda r: r.val_acc)
    if cfg.model_kind == "egat":
        save_checkpoint(best.model, out / "checkpoint.bin")
    results = {name: runs}
    write_metrics_csv(out / "metrics.csv", results)
    write_summary(out / "summary.txt", results, data.class_names)
    _write_history(out / "history.csv", runs)
    plot_loss_curves(out / "loss_curves.png", runs)
    plot_confusion(out / "confusion_matrix.png", best.confusion, data.class_names)
    for r in runs:
        print(f"seed={r.seed} best_epoch={r.best_epoch} val_acc={r.val_acc:.4f} "
              f"test_acc={r.test_acc:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    out = _out_dir(args)
    cfg = _config(args)
    data = _prepared(args, cfg)
    model = load_checkpoint(args.checkpoint)
    g = data.graphs[args.split]
    lp = egat_forward(None, model, g, tensor(data.features[args.split])).data
    loss, acc = nll_and_accuracy(lp, data.labels[args.split])
    conf = confusion_matrix(lp.argmax(axis=1), data.labels[args.split], data.n_classes)
    with open(out / "eval.txt", "w") as fh:
        fh.write(f"split={args.split}\nloss={loss!r}\naccuracy={acc!r}\n")
    plot_confusion(out / "confusion_matrix.png", conf, data.class_names)
    print(f"split={args.split} loss={loss:.4f} accuracy={acc:.4f}")
    return 0


def cmd_ablate(args) -> int:
    out = _out_dir(args)
    cfg = _config(args)
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; choose from {sorted(VARIANTS)}")
    data = _prepared(args, cfg)
    grid = run_ablation_grid(data, cfg, variants=variants)
    write_metrics_csv(out / "metrics.csv", grid)
    write_summary(out / "summary.txt", grid, data.class_names)
    _write_history(out / "history.csv", [r for rs in grid.values() for r in rs])
    plot_ablation_accuracy(out / "ablation_accuracy.png", grid)
    show = grid.get("full") or grid[variants[0]]
    plot_loss_curves(out / "loss_curves.png", show)
    best = max(show, key=lambda r: r.val_acc)
    plot_confusion(out / "confusion_matrix.png", best.confusion, data.class_names)
    for name, rs in grid.items():
        accs = [r.test_acc for r in rs]
        print(f"{name}: mean_test_acc={np.mean(accs):.4f} n={len(rs)}")
    return 0


def cmd_explain(args) -> int:
    out = _out_dir(args)
    cfg = _config(args)
    data = _prepared(args, cfg)
    model = load_checkpoint(args.checkpoint)
    g = data.graphs[args.split]
    x = data.features[args.split]
    nodes = [int(n) for n in args.nodes.split(",")]
    records = []
    for node in nodes:
        expl = explain_node(model, g, x, node, steps=args.steps, lr=args.lr,
                            lambda_size=args.lambda_size,
                            lambda_ent=args.lambda_ent, seed=args.seed)
        rec = {
            "node": expl.node,
            "predicted_class": expl.predicted_class,
            "top_features": expl.top_features(5).tolist(),
            "top_edges": [[s, t, round(v, 6)] for s, t, v in expl.top_edges(5)],
            "retention": round(expl.retention, 6),
        }
        records.append(rec)
        plot_explanation(out / f"explanation_node{node}.png", expl)
        print(json.dumps(rec))
    with open(out / "explanations.txt", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return 0


def cmd_export_attn(args) -> int:
    out = _out_dir(args)
    cfg = _config(args)
    data = _prepared(args, cfg)
    model = load_checkpoint(args.checkpoint)
    g = data.graphs[args.split]
    weights = attention_adjacency(model, g)
    pred, _ = predict(model, g, data.features[args.split])
    names = data.class_names or []
    meta = {
        "cell_id": data.cell_ids[args.split],
        "label": data.labels[args.split],
        "predicted": np.array([names[p] if p < len(names) else str(p) for p in pred],
                              dtype=object),
    }
    paths = export_embedding_inputs(out, g, weights, meta)
    log.info("wrote %s and %s", paths["edges"], paths["nodes"])
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cellgat", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true",
                   help="per-epoch progress on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=0,
                        help="data/preparation seed (trial seeds come from the config)")
        if config:
            sp.add_argument("--config", help="key=value config file")

    sp = sub.add_parser("synth", help="generate a synthetic labelled dataset")
    common(sp, config=False)
    sp.add_argument("--cells", type=int, default=3000)
    sp.add_argument("--genes", type=int, default=200)
    sp.add_argument("--clusters", type=int, default=6)
    sp.add_argument("--batches", type=int, default=3)
    sp.add_argument("--classes", type=int, default=3)
    sp.add_argument("--signal", type=float, default=1.0)
    sp.add_argument("--batch-effect", type=float, default=1.0)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("preprocess", help="filter, normalise and label a dataset")
    common(sp, config=False)
    sp.add_argument("--data", required=True)
    sp.add_argument("--min-cells-per-gene", type=int, default=3)
    sp.add_argument("--min-genes-per-cell", type=int, default=200)
    sp.add_argument("--label-scheme", choices=("none", "organoid", "patient"),
                    default="none")
    sp.add_argument("--viral-threshold", type=int, default=10)
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("build-graph", help="PCA + batch-balanced kNN graph")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.set_defaults(func=cmd_build_graph)

    sp = sub.add_parser("cluster", help="community detection on a graph file")
    common(sp, config=False)
    sp.add_argument("--graph", required=True)
    sp.add_argument("--resolution", type=float, default=1.0)
    sp.add_argument("--use-weights", action="store_true")
    sp.set_defaults(func=cmd_cluster)

    sp = sub.add_parser("edgefeat", help="attach the 18-column edge feature table")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--graph", required=True)
    sp.set_defaults(func=cmd_edgefeat)

    sp = sub.add_parser("train", help="train over the configured trial seeds")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="score a checkpoint on one split")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=("train", "val", "test"), default="test")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("ablate", help="run the model-variant grid")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--variants", help="comma list; default: all variants")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("explain", help="per-node mask explanations")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=("train", "val", "test"), default="test")
    sp.add_argument("--nodes", default="0", help="comma list of node ids")
    sp.add_argument("--steps", type=int, default=200)
    sp.add_argument("--lr", type=float, default=0.05)
    sp.add_argument("--lambda-size", type=float, default=0.005)
    sp.add_argument("--lambda-ent", type=float, default=0.1)
    sp.set_defaults(func=cmd_explain)

    sp = sub.add_parser("export-attn", help="attention-reweighted edge list")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=("train", "val", "test"), default="test")
    sp.set_defaults(func=cmd_export_attn)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except CellgatError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        log.error("%s", exc)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
