"""End-to-end runs of the command line on a small synthetic dataset."""

import json

import numpy as np
import pytest

from cellgat.cli import main
from cellgat.graph import read_graph
from cellgat.harness import TrainConfig

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"

SYNTH_ARGS = [
    "--cells", "140", "--genes", "40", "--clusters", "3",
    "--batches", "2", "--classes", "3",
    "--signal", "2.5", "--batch-effect", "0.3", "--seed", "7",
]

CFG = TrainConfig(
    k_neighbors=3, pca_dim=10, epochs=12, patience=3, dropout=0.2,
    gat_hidden=4, gat_heads=2, set_dim=4, seeds=(0, 1),
    n2v_dim=8, n2v_walks=2, n2v_length=10, n2v_window=3, n2v_epochs=1,
    aux_epochs=30, aux_patience=8,
)


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["synth", "--out", str(d)] + SYNTH_ARGS) == 0
    return d


@pytest.fixture(scope="module")
def cfg_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "train.cfg"
    p.write_text(CFG.to_text())
    return p


@pytest.fixture(scope="module")
def train_dir(tmp_path_factory, dataset_dir, cfg_file):
    out = tmp_path_factory.mktemp("train")
    code = main(["train", "--data", str(dataset_dir), "--out", str(out),
                 "--config", str(cfg_file), "--seed", "3"])
    assert code == 0
    return out


def test_synth_outputs(dataset_dir):
    for name in ("counts.mtx", "genes.txt", "meta.csv", "labels.csv"):
        assert (dataset_dir / name).exists()
    lines = (dataset_dir / "signal_genes.txt").read_text().splitlines()
    assert lines and all(len(ln.split()) == 3 for ln in lines)


def test_preprocess_keeps_labels(dataset_dir, tmp_path):
    out = tmp_path / "prep"
    code = main(["preprocess", "--data", str(dataset_dir), "--out", str(out),
                 "--min-cells-per-gene", "1", "--min-genes-per-cell", "1"])
    assert code == 0
    assert (out / "labels.csv").exists()


def test_graph_cluster_edgefeat_chain(dataset_dir, cfg_file, tmp_path, capsys):
    gdir = tmp_path / "g"
    assert main(["build-graph", "--data", str(dataset_dir), "--out", str(gdir),
                 "--config", str(cfg_file)]) == 0
    g = read_graph(gdir / "graph.txt")
    assert g.n_nodes == 140
    header = (gdir / "coords.csv").read_text().splitlines()[0]
    assert header.startswith("node,cell_id,c0")

    cdir = tmp_path / "c"
    assert main(["cluster", "--graph", str(gdir / "graph.txt"),
                 "--out", str(cdir)]) == 0
    assert "communities=" in capsys.readouterr().out
    rows = (cdir / "clusters.csv").read_text().splitlines()
    assert rows[0] == "node,community" and len(rows) == 141

    edir = tmp_path / "e"
    assert main(["edgefeat", "--data", str(dataset_dir),
                 "--graph", str(gdir / "graph.txt"), "--out", str(edir),
                 "--config", str(cfg_file)]) == 0
    gf = read_graph(edir / "graph_feat.txt")
    assert gf.edge_feat is not None and gf.edge_feat.shape[1] == 18
    assert gf.n_edges == g.n_edges + 140  # self loops added
    stats = (edir / "feature_stats.txt").read_text().splitlines()
    assert len(stats) == 4 and stats[0].startswith("curvature_mean=")


def test_train_outputs(train_dir):
    assert (train_dir / "checkpoint.bin").read_bytes()[:4] == b"CGT1"
    metrics = (train_dir / "metrics.csv").read_text().splitlines()
    assert metrics[0] == "variant,seed,best_epoch,epochs_run,val_acc,test_acc,test_loss"
    assert len(metrics) == 3  # two seeds
    assert all(row.startswith("full,") for row in metrics[1:])
    assert "best variant:" in (train_dir / "summary.txt").read_text()
    history = (train_dir / "history.csv").read_text().splitlines()
    assert history[0] == "variant,seed,epoch,train_loss,val_loss,val_acc"
    for name in ("loss_curves.png", "confusion_matrix.png"):
        assert (train_dir / name).read_bytes()[:8] == PNG_MAGIC


def test_train_reproducible(train_dir, dataset_dir, cfg_file, tmp_path):
    out = tmp_path / "again"
    code = main(["train", "--data", str(dataset_dir), "--out", str(out),
                 "--config", str(cfg_file), "--seed", "3"])
    assert code == 0
    assert (out / "metrics.csv").read_bytes() == (train_dir / "metrics.csv").read_bytes()
    assert (out / "checkpoint.bin").read_bytes() == (train_dir / "checkpoint.bin").read_bytes()


def test_evaluate(train_dir, dataset_dir, cfg_file, tmp_path, capsys):
    out = tmp_path / "eval"
    code = main(["evaluate", "--data", str(dataset_dir), "--out", str(out),
                 "--config", str(cfg_file), "--seed", "3",
                 "--checkpoint", str(train_dir / "checkpoint.bin")])
    assert code == 0
    text = (out / "eval.txt").read_text()
    fields = dict(ln.split("=", 1) for ln in text.splitlines())
    assert fields["split"] == "test"
    assert 0.0 <= float(fields["accuracy"]) <= 1.0
    assert "accuracy=" in capsys.readouterr().out
    assert (out / "confusion_matrix.png").read_bytes()[:8] == PNG_MAGIC


def test_ablate_two_variants(dataset_dir, cfg_file, tmp_path, capsys):
    out = tmp_path / "abl"
    code = main(["ablate", "--data", str(dataset_dir), "--out", str(out),
                 "--config", str(cfg_file), "--seed", "3",
                 "--variants", "full,gat"])
    assert code == 0
    metrics = (out / "metrics.csv").read_text()
    assert "full," in metrics and "gat," in metrics
    assert (out / "ablation_accuracy.png").read_bytes()[:8] == PNG_MAGIC
    printed = capsys.readouterr().out
    assert "full: mean_test_acc=" in printed and "gat: mean_test_acc=" in printed


def test_explain_emits_json(train_dir, dataset_dir, cfg_file, tmp_path, capsys):
    out = tmp_path / "expl"
    code = main(["explain", "--data", str(dataset_dir), "--out", str(out),
                 "--config", str(cfg_file), "--seed", "3",
                 "--checkpoint", str(train_dir / "checkpoint.bin"),
                 "--nodes", "0,3", "--steps", "25"])
    assert code == 0
    printed = [json.loads(ln) for ln in capsys.readouterr().out.splitlines()]
    assert [r["node"] for r in printed] == [0, 3]
    for r in printed:
        assert len(r["top_features"]) == 5
        assert 0.0 <= r["retention"] <= 1.0
    saved = [json.loads(ln) for ln in
             (out / "explanations.txt").read_text().splitlines()]
    assert saved == printed
    for n in (0, 3):
        assert (out / f"explanation_node{n}.png").read_bytes()[:8] == PNG_MAGIC


def test_export_attn(train_dir, dataset_dir, cfg_file, tmp_path):
    out = tmp_path / "attn"
    code = main(["export-attn", "--data", str(dataset_dir), "--out", str(out),
                 "--config", str(cfg_file), "--seed", "3",
                 "--checkpoint", str(train_dir / "checkpoint.bin")])
    assert code == 0
    g = read_graph(out / "attention_edges.txt")
    for i in range(g.n_nodes):
        assert abs(g.edge_weight[g.edge_ids(i)].sum() - 1.0) < 1e-9
    rows = (out / "nodes.csv").read_text().splitlines()
    assert rows[0] == "node,cell_id,label,predicted"
    assert len(rows) == g.n_nodes + 1


def test_exit_code_bad_config(dataset_dir, tmp_path):
    code = main(["train", "--data", str(dataset_dir),
                 "--out", str(tmp_path / "x"), "--config", "/no/such.cfg"])
    assert code == 2


def test_exit_code_missing_data(tmp_path):
    code = main(["preprocess", "--data", "/no/such/dir",
                 "--out", str(tmp_path / "x")])
    assert code == 3


def test_exit_code_bad_synth_params(tmp_path):
    code = main(["synth", "--out", str(tmp_path / "x"), "--cells", "0"])
    assert code == 2


def test_exit_code_unknown_variant(dataset_dir, tmp_path):
    code = main(["ablate", "--data", str(dataset_dir),
                 "--out", str(tmp_path / "x"), "--variants", "bogus"])
    assert code == 2


def test_exit_code_numerical_failure(train_dir, dataset_dir, cfg_file, tmp_path):
    code = main(["explain", "--data", str(dataset_dir),
                 "--out", str(tmp_path / "x"),
                 "--config", str(cfg_file), "--seed", "3",
                 "--checkpoint", str(train_dir / "checkpoint.bin"),
                 "--nodes", "0", "--steps", "30", "--lr", "1e8"])
    assert code == 4


def test_no_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2
