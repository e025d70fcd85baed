"""Graph datasets: directory format, preprocessing, splits, sampling, metrics.

A dataset is a directory holding ``edges.tsv`` (two integer columns),
``features.tsv`` (dense rows ``node f0 .. f{k-1}`` or sparse ``node col value``
triples), ``labels.tsv`` (``node class`` or ``node bitstring`` for multi-hot)
and ``meta.json`` with ``n``, ``f``, ``c``, ``labels`` ("single"|"multihot")
and optionally ``sparse_features``. Preprocessing symmetrises edges, adds
self-loops, L1-normalises feature rows and draws a seeded unstratified
6:2:2 split over the labelled nodes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import DTYPE

SPLIT_FRACTIONS = (0.6, 0.2, 0.2)

# published citation benchmarks: name -> (n, f, c), checked at load time
KNOWN_DATASET_SHAPES = {
    "cora": (2708, 1433, 7),
    "citeseer": (3327, 3703, 6),
    "pubmed": (19717, 500, 3),
}


class DatasetError(Exception):
    """Missing, corrupt, or inconsistent dataset files."""


@dataclass
class Graph:
    """A preprocessed graph with CSR-ordered directed edges.

    Edges are sorted by (target, source) so that ``edge_dst`` is monotone and
    ``indptr`` gives the incoming-edge range of each node. ``in_degrees``
    include the self-loop.
    """

    n: int
    edge_src: np.ndarray
    edge_dst: np.ndarray
    indptr: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    label_mask: np.ndarray
    n_classes: int
    multihot: bool
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    in_degrees: np.ndarray
    _reverse: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def num_edges(self) -> int:
        return int(self.edge_src.shape[0])

    @property
    def num_features(self) -> int:
        return int(self.features.shape[1])

    def reverse_edge_index(self) -> np.ndarray:
        """For each directed edge (u -> v), the index of (v -> u).

        Exists for every edge because preprocessing symmetrised the graph.
        """
        if self._reverse is None:
            key = self.edge_dst * self.n + self.edge_src  # sorted ascending
            want = self.edge_src * self.n + self.edge_dst
            pos = np.searchsorted(key, want)
            if pos.size and (pos.max() >= key.size or not np.array_equal(key[pos], want)):
                raise DatasetError("graph is not symmetrised; reverse edge missing")
            self._reverse = pos.astype(np.int64)
        return self._reverse


def _dedupe_sorted_edges(src: np.ndarray, dst: np.ndarray, n: int):
    order = np.lexsort((src, dst))
    src, dst = src[order], dst[order]
    key = dst * n + src
    keep = np.empty(key.size, dtype=bool)
    if key.size:
        keep[0] = True
        keep[1:] = key[1:] != key[:-1]
    return src[keep], dst[keep]


def normalise_features(features: np.ndarray, kind: str = "l1") -> np.ndarray:
    features = np.asarray(features, dtype=DTYPE)
    if kind == "none":
        return features
    if kind == "l1":
        norms = np.abs(features).sum(axis=1, keepdims=True)
    elif kind == "l2":
        norms = np.sqrt((features ** 2).sum(axis=1, keepdims=True))
    else:
        raise ValueError(f"unknown feature normalisation {kind!r}")
    out = features.copy()
    nz = norms[:, 0] > 0
    out[nz] /= norms[nz]
    return out


def split_masks(label_mask: np.ndarray, seed: int):
    """Seeded unstratified 6:2:2 split over labelled nodes."""
    idx = np.nonzero(label_mask)[0]
    rng = np.random.default_rng(seed)
    perm = rng.permutation(idx)
    n_tr = int(np.floor(SPLIT_FRACTIONS[0] * idx.size))
    n_va = int(np.floor(SPLIT_FRACTIONS[1] * idx.size))
    n = label_mask.shape[0]
    train = np.zeros(n, dtype=bool)
    val = np.zeros(n, dtype=bool)
    test = np.zeros(n, dtype=bool)
    train[perm[:n_tr]] = True
    val[perm[n_tr:n_tr + n_va]] = True
    test[perm[n_tr + n_va:]] = True
    return train, val, test


def build_graph(
    n: int,
    edges: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    multihot: bool = False,
    label_mask: np.ndarray | None = None,
    symmetrise: bool = True,
    self_loops: bool = True,
    feature_norm: str = "l1",
    split_seed: int = 0,
    masks: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
) -> Graph:
    """Assemble a Graph from raw arrays, applying the standard preprocessing."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        raise DatasetError("edge endpoint out of range")
    src, dst = edges[:, 0], edges[:, 1]
    if symmetrise:
        src, dst = np.concatenate([src, dst]), np.concatenate([dst, src])
    if self_loops:
        loop = np.arange(n, dtype=np.int64)
        src, dst = np.concatenate([src, loop]), np.concatenate([dst, loop])
    src, dst = _dedupe_sorted_edges(src, dst, n)
    indptr = np.searchsorted(dst, np.arange(n + 1))

    features = normalise_features(features, feature_norm)
    if features.shape[0] != n:
        raise DatasetError(f"feature rows {features.shape[0]} != n {n}")

    if multihot:
        labels = np.asarray(labels, dtype=DTYPE).reshape(n, -1)
        if labels.shape[1] != n_classes:
            raise DatasetError("multihot label width != c")
    else:
        labels = np.asarray(labels, dtype=np.int64).reshape(n)
        if labels.max(initial=-1) >= n_classes:
            raise DatasetError("class id out of range")
    if label_mask is None:
        label_mask = labels >= 0 if not multihot else np.ones(n, dtype=bool)
    label_mask = np.asarray(label_mask, dtype=bool)

    if masks is None:
        train, val, test = split_masks(label_mask, split_seed)
    else:
        train, val, test = (np.asarray(m, dtype=bool) for m in masks)
    return Graph(
        n=n, edge_src=src, edge_dst=dst, indptr=indptr,
        features=features, labels=labels, label_mask=label_mask,
        n_classes=n_classes, multihot=multihot,
        train_mask=train, val_mask=val, test_mask=test,
        in_degrees=np.diff(indptr).astype(np.int64),
    )


# ---------------------------------------------------------------------------
# directory format
# ---------------------------------------------------------------------------


def _read_meta(path: Path) -> dict:
    try:
        meta = json.loads(path.read_text())
    except FileNotFoundError:
        raise DatasetError(f"missing dataset file: {path}")
    except json.JSONDecodeError as e:
        raise DatasetError(f"corrupt meta.json at {path}: {e}")
    for key in ("n", "f", "c", "labels"):
        if key not in meta:
            raise DatasetError(f"meta.json missing key {key!r} at {path}")
    if meta["labels"] not in ("single", "multihot"):
        raise DatasetError("meta.json labels must be 'single' or 'multihot'")
    return meta


def _load_tsv(path: Path, dtype) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"missing dataset file: {path}")
    try:
        rows = np.loadtxt(path, delimiter="\t", dtype=dtype, ndmin=2)
    except ValueError as e:
        raise DatasetError(f"corrupt file {path}: {e}")
    return rows


def load_dataset(root, name: str, feature_norm: str = "l1", split_seed: int = 0) -> Graph:
    """Load a dataset directory ``root/name`` and preprocess it."""
    d = Path(root) / name
    meta = _read_meta(d / "meta.json")
    n, f, c = int(meta["n"]), int(meta["f"]), int(meta["c"])
    multihot = meta["labels"] == "multihot"

    if name.lower() in KNOWN_DATASET_SHAPES:
        expect = KNOWN_DATASET_SHAPES[name.lower()]
        if (n, f, c) != expect:
            raise DatasetError(f"{name}: meta {(n, f, c)} != published shape {expect}")

    edges = _load_tsv(d / "edges.tsv", np.int64)
    if edges.shape[1] != 2:
        raise DatasetError("edges.tsv must have two columns")

    if meta.get("sparse_features", False):
        trip = _load_tsv(d / "features.tsv", np.float64)
        if trip.shape[1] != 3:
            raise DatasetError("sparse features.tsv must have three columns")
        rows = trip[:, 0].astype(np.int64)
        cols = trip[:, 1].astype(np.int64)
        if rows.size and (rows.max() >= n or cols.max() >= f):
            raise DatasetError("sparse feature index out of range")
        features = np.zeros((n, f), dtype=DTYPE)
        features[rows, cols] = trip[:, 2]
    else:
        dense = _load_tsv(d / "features.tsv", np.float64)
        if dense.shape != (n, f + 1):
            raise DatasetError(f"features.tsv shape {dense.shape} != (n, f+1)")
        order = dense[:, 0].astype(np.int64)
        features = np.zeros((n, f), dtype=DTYPE)
        features[order] = dense[:, 1:]

    label_path = d / "labels.tsv"
    if not label_path.exists():
        raise DatasetError(f"missing dataset file: {label_path}")
    if multihot:
        labels = np.zeros((n, c), dtype=DTYPE)
        mask = np.zeros(n, dtype=bool)
        for line in label_path.read_text().splitlines():
            if not line.strip():
                continue
            node_s, bits = line.split("\t")
            if len(bits) != c or set(bits) - {"0", "1"}:
                raise DatasetError(f"label arity mismatch in {label_path}: {bits!r}")
            node = int(node_s)
            labels[node] = [int(b) for b in bits]
            mask[node] = True
    else:
        rows = _load_tsv(label_path, np.int64)
        if rows.shape[1] != 2:
            raise DatasetError(f"label arity mismatch in {label_path}")
        labels = np.full(n, -1, dtype=np.int64)
        labels[rows[:, 0]] = rows[:, 1]
        mask = np.zeros(n, dtype=bool)
        mask[rows[:, 0]] = True

    return build_graph(
        n, edges, features, labels, c, multihot=multihot, label_mask=mask,
        feature_norm=feature_norm, split_seed=split_seed,
    )


def save_dataset(root, name: str, n: int, f: int, c: int, edges: np.ndarray,
                 features: np.ndarray, labels: np.ndarray, multihot: bool = False,
                 sparse: bool = True) -> Path:
    """Write arrays in the directory format; features stored sparsely by default."""
    d = Path(root) / name
    d.mkdir(parents=True, exist_ok=True)
    meta = {"n": n, "f": f, "c": c,
            "labels": "multihot" if multihot else "single",
            "sparse_features": bool(sparse)}
    (d / "meta.json").write_text(json.dumps(meta, indent=1))
    np.savetxt(d / "edges.tsv", np.asarray(edges, dtype=np.int64), fmt="%d", delimiter="\t")
    features = np.asarray(features)
    if sparse:
        rows, cols = np.nonzero(features)
        trip = np.column_stack([rows, cols, features[rows, cols]])
        np.savetxt(d / "features.tsv", trip, fmt=["%d", "%d", "%.17g"], delimiter="\t")
    else:
        dense = np.column_stack([np.arange(n), features])
        np.savetxt(d / "features.tsv", dense,
                   fmt=["%d"] + ["%.17g"] * f, delimiter="\t")
    with open(d / "labels.tsv", "w") as fh:
        if multihot:
            for i in range(n):
                bits = "".join(str(int(b)) for b in labels[i])
                fh.write(f"{i}\t{bits}\n")
        else:
            for i in range(n):
                if labels[i] >= 0:
                    fh.write(f"{i}\t{int(labels[i])}\n")
    return d


def convert_citation_raw(content_path, cites_path, out_root, name: str) -> Path:
    """Convert the classic citation distribution (``.content`` + ``.cites``
    files: node id, bag-of-words columns, class label; cited/citing pairs)
    into the directory format."""
    content_path, cites_path = Path(content_path), Path(cites_path)
    if not content_path.exists():
        raise DatasetError(f"missing file: {content_path}")
    if not cites_path.exists():
        raise DatasetError(f"missing file: {cites_path}")

    ids, feats, label_names = [], [], []
    for line in content_path.read_text().splitlines():
        parts = line.strip().split()
        if not parts:
            continue
        ids.append(parts[0])
        feats.append([float(v) for v in parts[1:-1]])
        label_names.append(parts[-1])
    if not ids:
        raise DatasetError(f"empty content file: {content_path}")
    id_of = {node: i for i, node in enumerate(ids)}
    classes = sorted(set(label_names))
    labels = np.array([classes.index(l) for l in label_names], dtype=np.int64)
    features = np.array(feats, dtype=DTYPE)

    edges = []
    for line in cites_path.read_text().splitlines():
        parts = line.strip().split()
        if len(parts) != 2:
            continue
        a, b = parts
        if a in id_of and b in id_of:  # some lists cite papers outside the corpus
            edges.append((id_of[b], id_of[a]))
    edges = np.array(edges, dtype=np.int64).reshape(-1, 2)

    n, f = features.shape
    return save_dataset(out_root, name, n, f, len(classes), edges, features, labels)


# ---------------------------------------------------------------------------
# synthetic citation-style benchmark
# ---------------------------------------------------------------------------


def make_citation_graph(
    n: int = 2708,
    f: int = 1433,
    c: int = 7,
    seed: int = 7,
    avg_degree: float = 4.0,
    homophily: float = 0.9,
    words_per_node: int = 6,
    signal: float = 0.85,
    split_seed: int = 0,
    feature_norm: str = "l1",
) -> Graph:
    """Seeded planted-partition graph with class-informative sparse features.

    A deterministic stand-in with citation-network statistics: homophilous
    edges and bag-of-words rows whose vocabulary blocks lean toward the node's
    class. Used where a real benchmark directory is not available.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, c, size=n)
    by_class = [np.nonzero(labels == k)[0] for k in range(c)]

    deg = 1 + rng.poisson(max(avg_degree - 1.0, 0.0), size=n)
    srcs, dsts = [], []
    for i in range(n):
        same = rng.random(deg[i]) < homophily
        pool_same = by_class[labels[i]]
        partners = np.where(
            same,
            pool_same[rng.integers(0, pool_same.size, size=deg[i])],
            rng.integers(0, n, size=deg[i]),
        )
        srcs.append(np.full(deg[i], i))
        dsts.append(partners)
    edges = np.column_stack([np.concatenate(srcs), np.concatenate(dsts)])
    edges = edges[edges[:, 0] != edges[:, 1]]

    block = f // c
    features = np.zeros((n, f), dtype=DTYPE)
    for i in range(n):
        own = rng.random(words_per_node) < signal
        lo = labels[i] * block
        words = np.where(
            own,
            lo + rng.integers(0, block, size=words_per_node),
            rng.integers(0, f, size=words_per_node),
        )
        features[i, words] = 1.0

    return build_graph(n, edges, features, labels, c,
                       feature_norm=feature_norm, split_seed=split_seed)


# ---------------------------------------------------------------------------
# sampling and metrics
# ---------------------------------------------------------------------------


def sample_subgraph(g: Graph, k: int, seed: int) -> Graph:
    """Uniformly sample k nodes without replacement; induced subgraph with
    self-loops re-added, masks and labels carried over."""
    if not 0 < k <= g.n:
        raise ValueError(f"subgraph size {k} out of range (n = {g.n})")
    rng = np.random.default_rng(seed)
    nodes = np.sort(rng.choice(g.n, size=k, replace=False))
    remap = np.full(g.n, -1, dtype=np.int64)
    remap[nodes] = np.arange(k)
    keep = (remap[g.edge_src] >= 0) & (remap[g.edge_dst] >= 0)
    edges = np.column_stack([remap[g.edge_src[keep]], remap[g.edge_dst[keep]]])
    return build_graph(
        k, edges, g.features[nodes], g.labels[nodes], g.n_classes,
        multihot=g.multihot, label_mask=g.label_mask[nodes],
        symmetrise=False, self_loops=True, feature_norm="none",
        masks=(g.train_mask[nodes], g.val_mask[nodes], g.test_mask[nodes]),
    )


def metrics(pred: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    """Accuracy for single-label targets, micro-F1 at the 0.5 sigmoid
    threshold (logit > 0) for multi-hot targets."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty evaluation mask")
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if labels.ndim == 1:
        hard = pred.argmax(axis=1) if pred.ndim == 2 else pred
        return float((hard[mask] == labels[mask]).mean())
    if pred.shape != labels.shape:
        raise ValueError("prediction arity does not match label arity")
    hard = pred[mask] > 0
    true = labels[mask] > 0.5
    tp = float(np.logical_and(hard, true).sum())
    fp = float(np.logical_and(hard, ~true).sum())
    fn = float(np.logical_and(~hard, true).sum())
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0
