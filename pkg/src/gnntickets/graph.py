"""Graph data model, loaders, deterministic splits and input perturbations."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class DatasetError(ValueError):
    pass


class ParseError(DatasetError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.path = str(path)
        self.line = line


class DimensionMismatch(DatasetError):
    def __init__(self, what: str, expected: int, got: int):
        super().__init__(f"{what}: expected {expected}, got {got}")
        self.what = what
        self.expected = expected
        self.got = got


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class LoadReport:
    dropped_edges: int = 0
    skipped_rewires: int = 0

    def to_json(self) -> str:
        return json.dumps({"dropped_edges": self.dropped_edges, "skipped_rewires": self.skipped_rewires})


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _symmetric_binary(n: int, src, dst) -> sp.csr_matrix:
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    keep = src != dst
    src, dst = src[keep], dst[keep]
    rows = np.concatenate([src, dst])
    cols = np.concatenate([dst, src])
    a = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    a.sum_duplicates()
    a.data[:] = 1.0
    a.sort_indices()
    return a


@dataclass(eq=False)
class Graph:
    """Undirected attributed graph for node classification.

    ``adjacency`` is a symmetric 0/1 scipy CSR matrix without self-loops.
    Arrays are made read-only on construction; transforms return new graphs.
    """

    adjacency: sp.csr_matrix
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    node_ids: tuple[str, ...] | None = None
    report: LoadReport = field(default_factory=LoadReport)

    def __post_init__(self):
        n = self.adjacency.shape[0]
        if self.adjacency.shape != (n, n):
            raise DatasetError("adjacency must be square")
        self.features = _freeze(np.array(self.features, dtype=np.float64))
        self.labels = _freeze(np.array(self.labels, dtype=np.int64))
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise DimensionMismatch("feature rows", n, self.features.shape[0])
        if self.labels.shape != (n,):
            raise DimensionMismatch("labels", n, len(self.labels))
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DatasetError(f"labels must lie in [0, {self.n_classes})")
        if not np.all(np.isfinite(self.features)):
            raise DatasetError("features must be finite")
        a = sp.csr_matrix(self.adjacency, dtype=np.float64, copy=True)
        a.sum_duplicates()
        a.sort_indices()
        if a.nnz and not np.all(a.data == 1.0):
            raise DatasetError("adjacency entries must be 0/1")
        if (a != a.T).nnz:
            raise DatasetError("adjacency must be symmetric")
        for arr in (a.data, a.indices, a.indptr):
            arr.setflags(write=False)
        self.adjacency = a
        if self.node_ids is not None:
            self.node_ids = tuple(self.node_ids)
            if len(self.node_ids) != n:
                raise DimensionMismatch("node ids", n, len(self.node_ids))

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_edges(self) -> int:
        """Number of undirected edges."""
        return self.adjacency.nnz // 2

    def edge_list(self) -> np.ndarray:
        """Undirected edges as an ``(E, 2)`` array with ``src < dst``, sorted."""
        coo = sp.triu(self.adjacency, k=1).tocoo()
        e = np.stack([coo.row, coo.col], axis=1).astype(np.int64)
        return e[np.lexsort((e[:, 1], e[:, 0]))]

    def replace(self, **changes) -> Graph:
        kw = dict(adjacency=self.adjacency, features=self.features, labels=self.labels,
                  n_classes=self.n_classes, node_ids=self.node_ids, report=LoadReport())
        kw.update(changes)
        return Graph(**kw)

    def row_normalized(self) -> Graph:
        s = self.features.sum(axis=1, keepdims=True)
        s[s == 0] = 1.0
        return self.replace(features=self.features / s)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return (self.n_classes == other.n_classes
                and self.adjacency.shape == other.adjacency.shape
                and (self.adjacency != other.adjacency).nnz == 0
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels))


@dataclass(frozen=True)
class Splits:
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray

    def __post_init__(self):
        for name in ("train_idx", "val_idx", "test_idx"):
            object.__setattr__(self, name, _freeze(np.array(getattr(self, name), dtype=np.int64)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Splits):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in ("train_idx", "val_idx", "test_idx"))


@dataclass(frozen=True, eq=False)
class OodSplit:
    """Class hold-out for out-of-distribution detection.

    ``remapped_labels`` has one entry per node: the dense in-distribution id,
    or -1 for nodes of held-out classes. ``splits`` is the input split with
    held-out nodes removed from the training set only.
    """

    in_classes: tuple[int, ...]
    ood_node_idx: np.ndarray
    remapped_labels: np.ndarray
    splits: Splits

    @property
    def n_in_classes(self) -> int:
        return len(self.in_classes)

    def is_ood(self, idx) -> np.ndarray:
        return self.remapped_labels[np.asarray(idx, dtype=np.int64)] < 0

    def in_distribution_splits(self) -> Splits:
        """Train/val/test restricted to in-distribution nodes, for fitting and model selection."""
        s = self.splits
        return Splits(*(ix[~self.is_ood(ix)] for ix in (s.train_idx, s.val_idx, s.test_idx)))

    def training_graph(self, g: Graph) -> Graph:
        """Graph relabelled over the in-distribution classes.

        Held-out nodes get the placeholder label 0; they never appear in
        :meth:`in_distribution_splits`.
        """
        return g.replace(labels=np.where(self.remapped_labels < 0, 0, self.remapped_labels),
                         n_classes=self.n_in_classes)


# ---------------------------------------------------------------------------
# Loaders
# ---------------------------------------------------------------------------


def load_linqs(content_path, cites_path) -> Graph:
    """Read a LINQS citation release (``.content`` + ``.cites``).

    Content rows are ``id<TAB>f1 .. fk<TAB>label``; cites rows are
    ``target<TAB>source``. Class ids follow sorted label names, node order
    follows the content file. Citations touching unknown ids or forming
    self-loops are dropped and counted in ``graph.report``.
    """
    ids: list[str] = []
    index: dict[str, int] = {}
    rows: list[np.ndarray] = []
    names: list[str] = []
    width = None
    with open(content_path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < 3:
                raise ParseError(content_path, lineno, "expected id, features and label")
            if width is None:
                width = len(parts) - 2
            elif len(parts) - 2 != width:
                raise ParseError(content_path, lineno, f"expected {width} features, found {len(parts) - 2}")
            try:
                vec = np.array(parts[1:-1], dtype=np.float64)
            except ValueError:
                raise ParseError(content_path, lineno, "non-numeric feature") from None
            if parts[0] in index:
                raise ParseError(content_path, lineno, f"duplicate node id {parts[0]!r}")
            index[parts[0]] = len(ids)
            ids.append(parts[0])
            rows.append(vec)
            names.append(parts[-1])
    if not ids:
        raise DatasetError(f"{content_path}: no nodes")
    classes = sorted(set(names))
    class_id = {c: i for i, c in enumerate(classes)}

    src, dst = [], []
    dropped = 0
    with open(cites_path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ParseError(cites_path, lineno, "expected two node ids")
            a, b = parts
            if a not in index or b not in index or a == b:
                dropped += 1
                continue
            src.append(index[a])
            dst.append(index[b])
    n = len(ids)
    g = Graph(_symmetric_binary(n, src, dst), np.vstack(rows), [class_id[c] for c in names],
              len(classes), node_ids=tuple(ids))
    g.report.dropped_edges = dropped
    return g


def load_linqs_dir(directory) -> Graph:
    """Load the single ``*.content`` / ``*.cites`` pair found in ``directory``."""
    d = Path(directory)
    content = sorted(d.glob("*.content"))
    cites = sorted(d.glob("*.cites"))
    if len(content) != 1 or len(cites) != 1:
        raise DatasetError(f"{d}: expected one .content and one .cites file")
    return load_linqs(content[0], cites[0])


def save_bundle(g: Graph, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    edges = g.edge_list()
    with open(d / "edges.csv", "w") as f:
        for s, t in edges:
            f.write(f"{s},{t}\n")
    np.savetxt(d / "features.csv", g.features, delimiter=",", fmt="%.17g")
    np.savetxt(d / "labels.csv", g.labels, fmt="%d")
    (d / "meta.json").write_text(json.dumps({"n_nodes": g.n_nodes, "n_classes": g.n_classes}, indent=2))


def load_bundle(directory) -> Graph:
    """Read the portable bundle format written by :func:`save_bundle`."""
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    n, c = int(meta["n_nodes"]), int(meta["n_classes"])
    text = (d / "edges.csv").read_text().strip()
    if text:
        e = np.loadtxt(d / "edges.csv", delimiter=",", dtype=np.int64, ndmin=2)
        if e.shape[1] != 2:
            raise DimensionMismatch("edge columns", 2, e.shape[1])
        if e.size and (e.min() < 0 or e.max() >= n):
            raise DatasetError(f"edge endpoint outside [0, {n})")
    else:
        e = np.zeros((0, 2), dtype=np.int64)
    x = np.loadtxt(d / "features.csv", delimiter=",", dtype=np.float64, ndmin=2)
    if x.shape[0] != n:
        raise DimensionMismatch("features.csv rows vs meta.json n_nodes", n, x.shape[0])
    y = np.loadtxt(d / "labels.csv", dtype=np.int64, ndmin=1)
    if y.shape[0] != n:
        raise DimensionMismatch("labels.csv rows vs meta.json n_nodes", n, y.shape[0])
    return Graph(_symmetric_binary(n, e[:, 0], e[:, 1]), x, y, c)


def resolve_data_path(path, base=None) -> Path:
    """Resolve a dataset path against ``base`` and then ``$UGT_DATA_DIR``."""
    p = Path(path)
    if p.is_absolute():
        return p
    candidates = []
    if base is not None:
        candidates.append(Path(base) / p)
    candidates.append(Path.cwd() / p)
    root = os.environ.get("UGT_DATA_DIR")
    if root:
        candidates.append(Path(root) / p)
    for c in candidates:
        if c.exists():
            return c
    return candidates[0]


# ---------------------------------------------------------------------------
# Splits and transforms
# ---------------------------------------------------------------------------


def make_splits(g: Graph, per_class: int = 20, n_val: int = 500, n_test: int = 1000, seed: int = 0) -> Splits:
    """Balanced training set plus random validation and test sets.

    Under a seeded permutation, the first ``per_class`` nodes of every class
    form the training set; validation and test sets are the next ``n_val``
    and ``n_test`` remaining nodes in permutation order.
    """
    counts = np.bincount(g.labels, minlength=g.n_classes)
    for c, k in enumerate(counts):
        if k < per_class:
            raise DatasetError(f"class {c} has {k} nodes, fewer than per_class={per_class}")
    if per_class * g.n_classes + n_val + n_test > g.n_nodes:
        raise DatasetError(f"split sizes exceed {g.n_nodes} nodes")
    perm = np.random.default_rng(seed).permutation(g.n_nodes)
    taken = np.zeros(g.n_classes, dtype=np.int64)
    train, rest = [], []
    for v in perm:
        c = g.labels[v]
        if taken[c] < per_class:
            taken[c] += 1
            train.append(v)
        else:
            rest.append(v)
    return Splits(np.array(train), np.array(rest[:n_val]), np.array(rest[n_val:n_val + n_test]))


def perturb_features(g: Graph, fraction: float, seed: int = 0) -> Graph:
    """Replace the feature rows of ``round(fraction * n)`` random nodes with Bernoulli(0.5) noise."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    k = round_half_up(fraction * g.n_nodes)
    x = np.array(g.features)
    nodes = rng.choice(g.n_nodes, size=k, replace=False)
    x[nodes] = rng.integers(0, 2, size=(k, g.n_features)).astype(np.float64)
    return g.replace(features=x)


def perturb_edges(g: Graph, fraction: float, seed: int = 0, max_tries: int = 100) -> Graph:
    """Move one endpoint of ``round(fraction * E)`` random undirected edges.

    The new endpoint is uniform over nodes that create neither a self-loop
    nor a duplicate edge; after ``max_tries`` failed draws the edge is left
    in place and counted in ``report.skipped_rewires``.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    edges = g.edge_list()
    if len(edges) == 0:
        raise ValueError("perturb_edges needs at least one edge")
    rng = np.random.default_rng(seed)
    k = round_half_up(fraction * len(edges))
    chosen = rng.choice(len(edges), size=k, replace=False)
    present = {(int(a), int(b)) for a, b in edges}
    out = edges.copy()
    skipped = 0
    n = g.n_nodes
    for e in chosen:
        a, b = int(out[e, 0]), int(out[e, 1])
        keep = a if rng.random() < 0.5 else b
        for _ in range(max_tries):
            new = int(rng.integers(n))
            key = (min(keep, new), max(keep, new))
            if new != keep and key not in present:
                break
        else:
            skipped += 1
            continue
        present.discard((a, b))
        present.add(key)
        out[e] = key
    res = g.replace(adjacency=_symmetric_binary(n, out[:, 0], out[:, 1]))
    res.report.skipped_rewires = skipped
    return res


def make_ood_split(g: Graph, splits: Splits, holdout_fraction: float = 0.4, seed: int = 0) -> OodSplit:
    """Hold out ``round(holdout_fraction * n_classes)`` classes (at least one) as OOD."""
    if not 0.0 < holdout_fraction < 1.0:
        raise ValueError("holdout_fraction must lie in (0, 1)")
    h = max(1, round_half_up(holdout_fraction * g.n_classes))
    if g.n_classes - h < 2:
        raise DatasetError(f"holding out {h} of {g.n_classes} classes leaves fewer than 2")
    order = np.random.default_rng(seed).permutation(g.n_classes)
    held = set(int(c) for c in order[:h])
    in_classes = tuple(c for c in range(g.n_classes) if c not in held)
    lookup = np.full(g.n_classes, -1, dtype=np.int64)
    lookup[list(in_classes)] = np.arange(len(in_classes))
    remapped = _freeze(lookup[g.labels])
    ood_nodes = _freeze(np.flatnonzero(remapped < 0))
    train = splits.train_idx[remapped[splits.train_idx] >= 0]
    return OodSplit(in_classes, ood_nodes, remapped, Splits(train, splits.val_idx, splits.test_idx))


def synth_graph(n_nodes: int, n_classes: int, n_features: int, intra_p: float, inter_p: float,
                seed: int = 0, feature_noise: float = 1.0) -> Graph:
    """Stochastic block model with class-correlated noisy one-hot features.

    Node ``i`` belongs to block ``i * n_classes // n_nodes``. Its feature row
    is the one-hot vector of ``label % n_features`` plus Gaussian noise.
    """
    for p in (intra_p, inter_p):
        if not 0.0 <= p <= 1.0:
            raise ValueError("edge probabilities must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    labels = np.arange(n_nodes) * n_classes // n_nodes
    iu, ju = np.triu_indices(n_nodes, k=1)
    p = np.where(labels[iu] == labels[ju], intra_p, inter_p)
    hit = rng.random(len(iu)) < p
    x = np.zeros((n_nodes, n_features))
    x[np.arange(n_nodes), labels % n_features] = 1.0
    x += feature_noise * rng.standard_normal(x.shape)
    return Graph(_symmetric_binary(n_nodes, iu[hit], ju[hit]), x, labels, n_classes)
