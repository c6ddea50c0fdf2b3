"""Graph data model, bundle I/O and the self-loop normalized operator."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from qdc import _backend
from qdc._rng import substream

log = logging.getLogger(__name__)

BUNDLE_FILES = ("edges.tsv", "features.csv", "labels.txt")
SPLITS_FILE = "splits.json"


class BundleError(ValueError):
    """Raised for malformed or inconsistent graph bundles."""


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Split:
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray

    def __post_init__(self):
        for name in ("train_idx", "val_idx", "test_idx"):
            object.__setattr__(self, name, _frozen(getattr(self, name), np.int64))

    def validate(self, n):
        parts = (self.train_idx, self.val_idx, self.test_idx)
        if any(p.size == 0 for p in parts):
            raise BundleError("split parts must be nonempty")
        joined = np.concatenate(parts)
        if joined.min() < 0 or joined.max() >= n:
            raise BundleError("split index out of range")
        if np.unique(joined).size != joined.size:
            raise BundleError("split parts overlap")

    def to_json(self):
        return {
            "train": self.train_idx.tolist(),
            "val": self.val_idx.tolist(),
            "test": self.test_idx.tolist(),
        }


@dataclass(frozen=True)
class SparseMatrix:
    """Square real matrix in compressed row form (sorted columns, no zeros)."""

    dim: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "indptr", _frozen(self.indptr, np.int64))
        object.__setattr__(self, "indices", _frozen(self.indices, np.int64))
        object.__setattr__(self, "data", _frozen(self.data, np.float64))
        if self.indptr.shape[0] != self.dim + 1:
            raise ValueError("indptr length must be dim + 1")
        if self.indices.shape != self.data.shape or self.indptr[-1] != self.data.shape[0]:
            raise ValueError("indices/data lengths disagree with indptr")
        if self.data.size and (self.indices.min() < 0 or self.indices.max() >= self.dim):
            raise ValueError("column index out of range")
        if np.any(self.data == 0.0):
            raise ValueError("explicit zeros are not stored")

    @property
    def nnz(self):
        return int(self.indices.shape[0])

    @classmethod
    def from_scipy(cls, m):
        m = sp.csr_matrix(m, dtype=np.float64)
        m.eliminate_zeros()
        m.sum_duplicates()
        m.sort_indices()
        return cls(m.shape[0], m.indptr, m.indices, m.data)

    @classmethod
    def from_dense(cls, a):
        return cls.from_scipy(sp.csr_matrix(np.asarray(a, dtype=np.float64)))

    def to_scipy(self):
        return sp.csr_matrix(
            (self.data, self.indices, self.indptr), shape=(self.dim, self.dim)
        )

    def to_dense(self):
        return self.to_scipy().toarray()

    def matmat(self, X):
        """``S @ X`` through the selected kernel backend; 1-D input allowed."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            return _backend.csr_matmat(self.indptr, self.indices, self.data, X[:, None])[:, 0]
        return _backend.csr_matmat(self.indptr, self.indices, self.data, X)

    def __matmul__(self, X):
        return self.matmat(X)

    def diagonal(self):
        return self.to_scipy().diagonal()

    def is_symmetric(self):
        m = self.to_scipy()
        return (m != m.T).nnz == 0


@dataclass(frozen=True)
class GraphDataset:
    num_vertices: int
    edges: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    splits: tuple = field(default_factory=tuple)
    name: str = ""

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "edges", _frozen(edges, np.int64))
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats.reshape(self.num_vertices, -1)
        object.__setattr__(self, "features", _frozen(feats, np.float64))
        object.__setattr__(self, "labels", _frozen(self.labels, np.int64))
        object.__setattr__(self, "splits", tuple(self.splits))
        self.validate()

    def validate(self):
        n = self.num_vertices
        e = self.edges
        if e.size:
            if e.min() < 0 or e.max() >= n:
                raise BundleError("edge endpoint out of range")
            if np.any(e[:, 0] == e[:, 1]):
                raise BundleError("self-loop in edge list")
            if np.any(e[:, 0] > e[:, 1]):
                raise BundleError("edges must be stored as (i, j) with i < j")
            if np.unique(e[:, 0] * n + e[:, 1]).size != e.shape[0]:
                raise BundleError("duplicate edge")
        if self.features.shape[0] != n:
            raise BundleError(f"features have {self.features.shape[0]} rows, expected {n}")
        if self.labels.shape[0] != n:
            raise BundleError(f"labels have {self.labels.shape[0]} entries, expected {n}")
        if n and not np.array_equal(np.unique(self.labels), np.arange(self.labels.max() + 1)):
            raise BundleError("class ids must be contiguous from 0")
        for s in self.splits:
            s.validate(n)

    @property
    def num_edges(self):
        return int(self.edges.shape[0])

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1 if self.num_vertices else 0

    def adjacency(self):
        """Symmetric 0/1 adjacency without self-loops."""
        n = self.num_vertices
        i, j = self.edges[:, 0], self.edges[:, 1]
        rows = np.concatenate([i, j])
        cols = np.concatenate([j, i])
        a = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
        return SparseMatrix.from_scipy(a)

    def with_splits(self, splits):
        return GraphDataset(self.num_vertices, self.edges, self.features, self.labels,
                            tuple(splits), self.name)

    def content_hash(self):
        h = hashlib.sha256()
        for a in (self.edges, self.features, self.labels):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update(str(self.num_vertices).encode())
        return h.hexdigest()


def canonical_edges(pairs, n=None):
    """Deduplicate unordered pairs and drop self-loops.

    Returns ``(edges, n_duplicates, n_self_loops)`` with edges sorted and
    stored as ``i < j``.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    loops = pairs[:, 0] == pairs[:, 1]
    pairs = pairs[~loops]
    lo = np.minimum(pairs[:, 0], pairs[:, 1])
    hi = np.maximum(pairs[:, 0], pairs[:, 1])
    uniq = np.unique(np.stack([lo, hi], axis=1), axis=0) if lo.size else np.empty((0, 2), np.int64)
    return uniq, int(lo.size - uniq.shape[0]), int(loops.sum())


def read_edges(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise BundleError(f"{path}:{lineno}: expected 'i<TAB>j'")
            try:
                rows.append((int(parts[0]), int(parts[1])))
            except ValueError as exc:
                raise BundleError(f"{path}:{lineno}: {exc}") from None
    return np.array(rows, dtype=np.int64).reshape(-1, 2)


def _read_features(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([float(v) for v in line.split(",")])
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise BundleError(f"{path}: ragged feature rows")
    return np.array(rows, dtype=np.float64).reshape(len(rows), widths.pop() if widths else 0)


def _read_labels(path):
    with open(path, encoding="utf-8") as fh:
        return np.array([int(line) for line in fh if line.strip()], dtype=np.int64)


def load_graph_bundle(path):
    """Load a bundle directory (edges.tsv, features.csv, labels.txt, splits.json)."""
    path = Path(path)
    for name in BUNDLE_FILES:
        if not (path / name).is_file():
            raise BundleError(f"missing bundle file: {path / name}")
    labels = _read_labels(path / "labels.txt")
    n = labels.shape[0]
    raw = read_edges(path / "edges.tsv")
    if raw.size and (raw.min() < 0 or raw.max() >= n):
        raise BundleError(f"edge endpoint out of range [0, {n})")
    edges, dups, loops = canonical_edges(raw)
    if dups or loops:
        log.warning("%s: dropped %d duplicate edges and %d self-loops", path, dups, loops)
    features = _read_features(path / "features.csv")
    if features.shape[0] != n:
        raise BundleError(f"features.csv has {features.shape[0]} rows but labels.txt has {n}")
    splits = ()
    if (path / SPLITS_FILE).is_file():
        with open(path / SPLITS_FILE, encoding="utf-8") as fh:
            raw_splits = json.load(fh)
        splits = tuple(Split(s["train"], s["val"], s["test"]) for s in raw_splits)
    return GraphDataset(n, edges, features, labels, splits, name=path.name)


def save_graph_bundle(g, path):
    """Write ``g`` in bundle format; floats use shortest round-trip repr."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "edges.tsv", "w", encoding="utf-8") as fh:
        fh.writelines(f"{i}\t{j}\n" for i, j in g.edges.tolist())
    with open(path / "features.csv", "w", encoding="utf-8") as fh:
        fh.writelines(",".join(map(repr, row)) + "\n" for row in g.features.tolist())
    with open(path / "labels.txt", "w", encoding="utf-8") as fh:
        fh.writelines(f"{v}\n" for v in g.labels.tolist())
    if g.splits:
        with open(path / SPLITS_FILE, "w", encoding="utf-8") as fh:
            json.dump([s.to_json() for s in g.splits], fh)


def normalized_operator(g):
    """``D^{-1/2} (A + I) D^{-1/2}`` with D the degree of ``A + I``.

    Entries are formed as ``1/sqrt(d_i * d_j)`` so the result is exactly
    symmetric and its spectrum lies in [-1, 1].
    """
    n = g.num_vertices
    a = g.adjacency().to_scipy() + sp.identity(n, format="csr")
    a = sp.csr_matrix(a)
    a.sort_indices()
    deg = np.asarray(a.sum(axis=1)).ravel()
    rows = np.repeat(np.arange(n), np.diff(a.indptr))
    vals = 1.0 / np.sqrt(deg[rows] * deg[a.indices])
    return SparseMatrix(n, a.indptr, a.indices, vals)


def homophily_from_adjacency(adj, labels):
    """Mean fraction of same-label neighbours; empty neighbourhoods count 0."""
    n = adj.dim
    if n == 0:
        return 0.0
    same, total = _backend.homophily_counts(adj.indptr, adj.indices,
                                            np.ascontiguousarray(labels, dtype=np.int64))
    frac = np.zeros(n)
    nz = total > 0
    frac[nz] = same[nz] / total[nz]
    return float(frac.sum() / n)


def homophily(g):
    """Node homophily of ``g`` over its original (loop-free) adjacency."""
    return homophily_from_adjacency(g.adjacency(), g.labels)


def generate_random_splits(g, seed=0, fractions=(0.48, 0.32, 0.20), num_splits=10):
    """Stratified random splits.

    Totals are ``round(f * N)`` per part; per-class quotas come from the
    largest-remainder rule so the totals are met exactly. Every class needs at
    least one member per part.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr <= 0) or fr.sum() > 1 + 1e-12:
        raise ValueError(f"fractions must be three positive numbers summing to <= 1, got {fractions}")
    n = g.num_vertices
    classes = [np.flatnonzero(g.labels == c) for c in range(g.num_classes)]
    sizes = np.array([c.size for c in classes])
    small = np.flatnonzero(sizes < 3)
    if small.size:
        raise ValueError(f"classes {small.tolist()} have fewer than 3 members; cannot stratify")
    totals = np.round(fr * n).astype(int)
    quotas = np.stack([_largest_remainder(sizes * f, t, sizes) for f, t in zip(fr, totals)], axis=1)
    quotas = np.maximum(quotas, 1)
    splits = []
    for s in range(num_splits):
        rng = substream(seed, "split", s)
        parts = ([], [], [])
        for members, q in zip(classes, quotas):
            perm = rng.permutation(members)
            lo = 0
            for p in range(3):
                parts[p].append(perm[lo:lo + q[p]])
                lo += q[p]
        splits.append(Split(*(np.sort(np.concatenate(p)) for p in parts)))
    return splits


def _largest_remainder(ideal, total, caps):
    base = np.floor(ideal).astype(int)
    rem = ideal - base
    short = int(total - base.sum())
    order = np.lexsort((np.arange(rem.size), -rem))
    for idx in order:
        if short <= 0:
            break
        if base[idx] < caps[idx]:
            base[idx] += 1
            short -= 1
    return base
