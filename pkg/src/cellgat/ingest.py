"""Loading, preprocessing and synthesis of single-cell count datasets.

A dataset is a dense cells x genes count matrix plus per-cell metadata.
On disk: counts.mtx (Matrix Market coordinate, cells as rows), genes.txt
(one name per line), meta.csv (cell_id, batch, and optional condition /
timepoint / viral_count / severity columns), and optionally labels.csv.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

ORGANOID_CLASSES = [
    "mock",
    "1dpi_bystander",
    "1dpi_infected",
    "2dpi_bystander",
    "2dpi_infected",
    "3dpi_bystander",
    "3dpi_infected",
]
PATIENT_CLASSES = ["healthy", "moderate", "severe"]


@dataclass
class CellDataset:
    counts: np.ndarray  # cells x genes, float64, non-negative
    gene_names: list[str]
    cell_meta: dict[str, np.ndarray]
    labels: np.ndarray | None = None
    class_names: list[str] | None = None

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.float64)
        n, g = self.counts.shape
        if len(self.gene_names) != g:
            raise DataError(f"{g} matrix columns but {len(self.gene_names)} gene names")
        ids = self.cell_meta.get("cell_id")
        if ids is None or len(ids) != n:
            raise DataError("cell_meta must carry one cell_id per matrix row")
        if len(set(ids.tolist())) != n:
            raise DataError("cell ids must be unique")
        if "batch" not in self.cell_meta:
            raise DataError("cell_meta must carry a batch column")
        if np.any(~np.isfinite(self.counts)) or np.any(self.counts < 0):
            raise DataError("counts must be finite and non-negative")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise DataError("labels must be one integer per cell")

    @property
    def n_cells(self) -> int:
        return self.counts.shape[0]

    @property
    def n_genes(self) -> int:
        return self.counts.shape[1]

    def batch_ids(self) -> np.ndarray:
        """Batch column recoded to contiguous integer ids (sorted name order)."""
        names = self.cell_meta["batch"]
        uniq = sorted(set(names.tolist()))
        lookup = {b: i for i, b in enumerate(uniq)}
        return np.array([lookup[b] for b in names], dtype=np.int64)

    def subset_cells(self, idx) -> "CellDataset":
        idx = np.asarray(idx, dtype=np.int64)
        meta = {k: v[idx] for k, v in self.cell_meta.items()}
        labels = None if self.labels is None else self.labels[idx]
        return CellDataset(self.counts[idx], list(self.gene_names), meta, labels, self.class_names)


# ---------------------------------------------------------------------------
# Matrix Market IO


def _read_mtx(path) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("%%MatrixMarket"):
            raise DataError(f"{path}: line 1: not a MatrixMarket file")
        parts = header.split()
        if len(parts) < 4 or parts[1] != "matrix" or parts[2] != "coordinate":
            raise DataError(f"{path}: line 1: expected 'matrix coordinate' header")
        if parts[3] not in ("integer", "real"):
            raise DataError(f"{path}: line 1: unsupported field type {parts[3]!r}")
        lineno = 1
        line = fh.readline()
        lineno += 1
        while line.startswith("%"):
            line = fh.readline()
            lineno += 1
        try:
            rows, cols, nnz = (int(v) for v in line.split())
        except ValueError:
            raise DataError(f"{path}: line {lineno}: malformed size line: {line.strip()!r}")
        mat = np.zeros((rows, cols), dtype=np.float64)
        for _ in range(nnz):
            line = fh.readline()
            lineno += 1
            if not line:
                raise DataError(f"{path}: line {lineno}: expected {nnz} entries, file truncated")
            fields = line.split()
            if len(fields) != 3:
                raise DataError(f"{path}: line {lineno}: expected 'row col value'")
            try:
                i, j = int(fields[0]), int(fields[1])
                v = float(fields[2])
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}")
            if not (1 <= i <= rows and 1 <= j <= cols):
                raise DataError(f"{path}: line {lineno}: index ({i}, {j}) out of bounds")
            if v < 0:
                raise DataError(f"{path}: line {lineno}: negative count {v}")
            mat[i - 1, j - 1] = v
    return mat


def _write_mtx(path, mat: np.ndarray) -> None:
    integral = np.array_equal(mat, np.round(mat))
    kind = "integer" if integral else "real"
    rows, cols = mat.shape
    ii, jj = np.nonzero(mat)
    with open(path, "w") as fh:
        fh.write(f"%%MatrixMarket matrix coordinate {kind} general\n")
        fh.write(f"{rows} {cols} {ii.size}\n")
        for i, j in zip(ii, jj):
            v = mat[i, j]
            sval = str(int(v)) if integral else repr(float(v))
            fh.write(f"{i + 1} {j + 1} {sval}\n")


def _read_meta(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty metadata file")
        rows = list(reader)
    meta = {}
    for col in reader.fieldnames:
        meta[col] = np.array([r[col] if r[col] is not None else "" for r in rows], dtype=object)
    for required in ("cell_id", "batch"):
        if required not in meta:
            raise DataError(f"{path}: missing required column {required!r}")
    return meta


def _write_meta(path, meta: dict[str, np.ndarray]) -> None:
    cols = list(meta)
    n = len(meta["cell_id"])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for i in range(n):
            writer.writerow([meta[c][i] for c in cols])


def load_dataset(matrix_path, genes_path, meta_path, labels_path=None) -> CellDataset:
    """Load counts + gene names + metadata (and optional labels) from disk."""
    counts = _read_mtx(matrix_path)
    genes = [ln.strip() for ln in open(genes_path) if ln.strip()]
    meta = _read_meta(meta_path)
    if counts.shape[0] != len(meta["cell_id"]):
        raise DataError(
            f"{matrix_path}: {counts.shape[0]} matrix rows but "
            f"{len(meta['cell_id'])} metadata rows"
        )
    if counts.shape[1] != len(genes):
        raise DataError(
            f"{matrix_path}: {counts.shape[1]} matrix columns but {len(genes)} gene names"
        )
    labels = class_names = None
    if labels_path is not None:
        by_cell, class_names = _read_labels(labels_path)
        try:
            labels = np.array([by_cell[c] for c in meta["cell_id"]], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"{labels_path}: no label for cell {exc.args[0]!r}")
    return CellDataset(counts, genes, meta, labels, class_names)


def _read_labels(path) -> tuple[dict, list[str]]:
    by_cell: dict[str, int] = {}
    names: dict[int, str] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for required in ("cell_id", "label_id", "label_name"):
            if reader.fieldnames is None or required not in reader.fieldnames:
                raise DataError(f"{path}: missing required column {required!r}")
        for row in reader:
            lid = int(row["label_id"])
            by_cell[row["cell_id"]] = lid
            names[lid] = row["label_name"]
    class_names = [names.get(i, f"class_{i}") for i in range(max(names) + 1)] if names else []
    return by_cell, class_names


def save_dataset(d: CellDataset, out_dir) -> None:
    """Write counts.mtx, genes.txt, meta.csv (and labels.csv when present)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_mtx(out / "counts.mtx", d.counts)
    (out / "genes.txt").write_text("".join(g + "\n" for g in d.gene_names))
    _write_meta(out / "meta.csv", d.cell_meta)
    if d.labels is not None:
        with open(out / "labels.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["cell_id", "label_id", "label_name"])
            names = d.class_names or []
            for cid, lab in zip(d.cell_meta["cell_id"], d.labels):
                name = names[lab] if lab < len(names) else f"class_{lab}"
                writer.writerow([cid, int(lab), name])


def load_dataset_dir(data_dir) -> CellDataset:
    data = Path(data_dir)
    labels = data / "labels.csv"
    return load_dataset(
        data / "counts.mtx",
        data / "genes.txt",
        data / "meta.csv",
        labels if labels.exists() else None,
    )


# ---------------------------------------------------------------------------
# filtering and normalisation


def filter_counts(d: CellDataset, min_cells_per_gene: int = 3, min_genes_per_cell: int = 200) -> CellDataset:
    """Drop genes expressed in fewer than min_cells_per_gene cells, then cells
    expressing fewer than min_genes_per_cell of the remaining genes.

    One pass, gene filter first; no fixpoint iteration.
    """
    gene_keep = (d.counts > 0).sum(axis=0) >= min_cells_per_gene
    counts = d.counts[:, gene_keep]
    cell_keep = (counts > 0).sum(axis=1) >= min_genes_per_cell
    if not np.any(cell_keep):
        raise DataError("no cells survive filtering")
    if not np.any(gene_keep):
        raise DataError("no genes survive filtering")
    genes = [g for g, k in zip(d.gene_names, gene_keep) if k]
    idx = np.nonzero(cell_keep)[0]
    meta = {k: v[idx] for k, v in d.cell_meta.items()}
    labels = None if d.labels is None else d.labels[idx]
    return CellDataset(counts[cell_keep], genes, meta, labels, d.class_names)


def normalize_counts(d: CellDataset) -> CellDataset:
    """Scale each cell to the median library size, then sqrt-transform."""
    lib = d.counts.sum(axis=1)
    if np.any(lib <= 0):
        raise DataError("cells with zero total counts cannot be normalised")
    target = float(np.median(lib))
    scaled = d.counts * (target / lib)[:, None]
    return CellDataset(
        np.sqrt(scaled), list(d.gene_names), dict(d.cell_meta), d.labels, d.class_names
    )


def filter_and_normalize(
    d: CellDataset, min_cells_per_gene: int = 3, min_genes_per_cell: int = 200
) -> CellDataset:
    return normalize_counts(filter_counts(d, min_cells_per_gene, min_genes_per_cell))


# ---------------------------------------------------------------------------
# label derivation


def derive_labels_organoid(d: CellDataset, viral_threshold: int = 10) -> CellDataset:
    """Seven infection-state classes: mock, plus bystander/infected at each of
    1/2/3 dpi. Infected means viral_count strictly above the threshold."""
    for col in ("condition", "timepoint", "viral_count"):
        if col not in d.cell_meta:
            raise DataError(f"organoid labels need metadata column {col!r}")
    cond = [str(v).strip().lower() for v in d.cell_meta["condition"]]
    tp = [str(v).strip().lower() for v in d.cell_meta["timepoint"]]
    labels = np.empty(d.n_cells, dtype=np.int64)
    for i in range(d.n_cells):
        if cond[i] == "mock":
            labels[i] = 0
            continue
        if tp[i] not in ("1dpi", "2dpi", "3dpi"):
            raise DataError(f"cell {d.cell_meta['cell_id'][i]!r}: unknown timepoint {tp[i]!r}")
        try:
            viral = int(d.cell_meta["viral_count"][i])
        except (TypeError, ValueError):
            raise DataError(
                f"cell {d.cell_meta['cell_id'][i]!r}: viral_count "
                f"{d.cell_meta['viral_count'][i]!r} is not an integer"
            )
        day = int(tp[i][0])
        infected = viral > viral_threshold
        labels[i] = 1 + 2 * (day - 1) + (1 if infected else 0)
    return CellDataset(d.counts, list(d.gene_names), dict(d.cell_meta), labels, list(ORGANOID_CLASSES))


def derive_labels_patient(d: CellDataset) -> CellDataset:
    """Three severity classes, case-normalised from the severity column."""
    if "severity" not in d.cell_meta:
        raise DataError("patient labels need metadata column 'severity'")
    lookup = {name: i for i, name in enumerate(PATIENT_CLASSES)}
    labels = np.empty(d.n_cells, dtype=np.int64)
    for i, raw in enumerate(d.cell_meta["severity"]):
        key = str(raw).strip().lower()
        if key not in lookup:
            raise DataError(f"cell {d.cell_meta['cell_id'][i]!r}: unknown severity {raw!r}")
        labels[i] = lookup[key]
    return CellDataset(d.counts, list(d.gene_names), dict(d.cell_meta), labels, list(PATIENT_CLASSES))


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitAssignment:
    """Per-cell split tag: 0 = train, 1 = val, 2 = test."""

    tags: np.ndarray
    seed: int

    _NAMES = ("train", "val", "test")

    def indices(self, split: str) -> np.ndarray:
        if split not in self._NAMES:
            raise ConfigError(f"unknown split {split!r}")
        return np.nonzero(self.tags == self._NAMES.index(split))[0]


def split_70_15_15(d: CellDataset, seed: int = 0) -> SplitAssignment:
    """Shuffled 70/15/15 split (counts within one cell of exact proportions)."""
    if d.labels is None:
        raise DataError("splitting requires labels")
    n = d.n_cells
    if n < 3:
        raise DataError("need at least 3 cells to split")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_train = int(round(0.7 * n))
    n_val = int(round(0.15 * n))
    if n_train + n_val >= n:
        n_train = n - 2
        n_val = 1
    tags = np.empty(n, dtype=np.int64)
    tags[perm[:n_train]] = 0
    tags[perm[n_train:n_train + n_val]] = 1
    tags[perm[n_train + n_val:]] = 2
    split = SplitAssignment(tags, seed)
    present = set(d.labels.tolist())
    for name in split._NAMES:
        got = set(d.labels[split.indices(name)].tolist())
        if got != present:
            log.warning("split %s is missing classes %s", name, sorted(present - got))
    return split


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    """Generator parameters. signal_strength scales every class-label channel
    (expression bumps and neighbourhood mixing); 0 removes all class signal.
    """

    n_cells: int = 3000
    n_genes: int = 200
    n_clusters: int = 6
    n_batches: int = 3
    n_classes: int = 3
    signal_strength: float = 1.0
    batch_effect: float = 1.0
    seed: int = 0
    n_signal_genes: int = 5
    gene_signal: float = 0.4
    mix_signal: float = 0.3
    base_rate: float = 3.0
    marker_boost: float = 4.0
    marker_frac: float = 0.06


@dataclass
class SyntheticTruth:
    """Ground truth behind a generated dataset."""

    clusters: np.ndarray
    partners: np.ndarray
    classes: np.ndarray
    batches: np.ndarray
    signal_genes: dict[int, np.ndarray] = field(default_factory=dict)


def generate_synthetic(spec: SyntheticSpec) -> tuple[CellDataset, SyntheticTruth]:
    """Poisson counts from cluster archetypes with planted class signal.

    Each cluster has a disjoint marker-gene block. Each cell mixes its own
    archetype with a partner cluster chosen by its class (mixing weight
    scales with signal_strength), so class information lives partly in
    neighbourhood composition. Classes also bump a small set of dedicated
    signal genes. Batches add per-gene offsets on the log-rate scale, the
    usual depth/chemistry noise model, so the warp is not linearly
    removable from the count matrix.
    """
    s = spec
    if min(s.n_cells, s.n_genes, s.n_clusters, s.n_batches, s.n_classes) < 1:
        raise ConfigError("all synthetic sizes must be positive")
    if s.n_clusters < 2 and s.mix_signal > 0:
        raise ConfigError("partner mixing needs at least 2 clusters")
    rng = np.random.default_rng(s.seed)

    classes = np.arange(s.n_cells) % s.n_classes
    rng.shuffle(classes)
    batches = np.arange(s.n_cells) % s.n_batches
    rng.shuffle(batches)
    clusters = rng.integers(0, s.n_clusters, s.n_cells)
    partners = (clusters + 1 + classes) % s.n_clusters

    baseline = s.base_rate * rng.uniform(0.5, 1.5, s.n_genes)
    n_markers = max(3, int(s.marker_frac * s.n_genes))
    shuffled_genes = rng.permutation(s.n_genes)
    arch = np.tile(baseline, (s.n_clusters, 1))
    used = 0
    for z in range(s.n_clusters):
        block = shuffled_genes[used:used + n_markers]
        used += n_markers
        if block.size == 0:
            raise ConfigError("not enough genes for distinct cluster markers")
        arch[z, block] *= s.marker_boost

    signal_genes: dict[int, np.ndarray] = {}
    for c in range(s.n_classes):
        block = shuffled_genes[used:used + s.n_signal_genes]
        used += s.n_signal_genes
        if block.size < s.n_signal_genes:
            raise ConfigError("not enough genes for class signal blocks")
        signal_genes[c] = np.sort(block)

    batch_shift = s.batch_effect * rng.normal(0.0, 0.3, (s.n_batches, s.n_genes))

    mix = s.mix_signal * s.signal_strength * rng.uniform(0.5, 1.0, s.n_cells)
    mix = np.clip(mix, 0.0, 0.45)
    rate = (1.0 - mix)[:, None] * arch[clusters] + mix[:, None] * arch[partners]
    bump = 1.0 + s.gene_signal * s.signal_strength
    for c in range(s.n_classes):
        rows = classes == c
        rate[np.ix_(rows, signal_genes[c])] *= bump
    rate = np.maximum(rate * np.exp(batch_shift[batches]), 0.01)
    counts = rng.poisson(rate).astype(np.float64)

    width = len(str(s.n_cells - 1))
    meta = {
        "cell_id": np.array([f"cell_{i:0{width}d}" for i in range(s.n_cells)], dtype=object),
        "batch": np.array([f"b{b}" for b in batches], dtype=object),
        "condition": np.array([f"class_{c}" for c in classes], dtype=object),
        "cluster": np.array([str(z) for z in clusters], dtype=object),
    }
    dataset = CellDataset(
        counts,
        [f"gene_{j:04d}" for j in range(s.n_genes)],
        meta,
        classes.astype(np.int64),
        [f"class_{c}" for c in range(s.n_classes)],
    )
    truth = SyntheticTruth(clusters, partners, classes, batches, signal_genes)
    return dataset, truth
