"""Pure numpy implementations of the hot kernels.

Every function here has a twin in ``_core.pyx`` with the same signature and
bit-compatible output. ``qdc._backend`` picks one at import time.
"""
import numpy as np


def csr_matmat(indptr, indices, data, X):
    """Return ``S @ X`` for the CSR matrix ``(indptr, indices, data)``."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    n_rows = indptr.shape[0] - 1
    out = np.zeros((n_rows, X.shape[1]), dtype=np.float64)
    if indices.shape[0] == 0:
        return out
    rows = np.repeat(np.arange(n_rows), np.diff(indptr))
    contrib = data[:, None] * X[indices]
    # add.at accumulates in storage order from zero, like the C loop
    # (reduceat would sum pairwise and differ in the last bit)
    np.add.at(out, rows, contrib)
    return out


def threshold_block(block, eps):
    """Keep entries with ``|v| >= eps`` (exact zeros always dropped).

    Returns per-row counts, column indices and values in row-major order.
    """
    block = np.asarray(block, dtype=np.float64)
    mask = (np.abs(block) >= eps) & (block != 0.0)
    counts = mask.sum(axis=1).astype(np.int64)
    rows, cols = np.nonzero(mask)
    return counts, cols.astype(np.int64), block[rows, cols]


def topk_block(block, k):
    """Keep the ``k`` largest-magnitude nonzero entries of each row.

    Ties are broken toward the lower column index; kept columns are returned
    sorted within each row.
    """
    block = np.asarray(block, dtype=np.float64)
    h, n = block.shape
    k = min(int(k), n)
    mag = np.abs(block)
    # stable sort on -|v| puts lower column first among equal magnitudes
    order = np.argsort(-mag, axis=1, kind="stable")[:, :k]
    keep = np.zeros_like(block, dtype=bool)
    np.put_along_axis(keep, order, True, axis=1)
    keep &= block != 0.0
    counts = keep.sum(axis=1).astype(np.int64)
    rows, cols = np.nonzero(keep)
    return counts, cols.astype(np.int64), block[rows, cols]


def homophily_counts(indptr, indices, labels):
    """Per-vertex (same-label neighbour count, neighbour count), self excluded."""
    n = indptr.shape[0] - 1
    lengths = np.diff(indptr)
    owner = np.repeat(np.arange(n), lengths)
    off_diag = indices != owner
    same = (labels[indices] == labels[owner]) & off_diag
    same_counts = np.bincount(owner[same], minlength=n).astype(np.int64)
    total = np.bincount(owner[off_diag], minlength=n).astype(np.int64)
    return same_counts, total
