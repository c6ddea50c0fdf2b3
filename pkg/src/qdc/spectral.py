"""Eigensolvers for the normalized operator.

``dense_eigensolve`` is the full-spectrum reference used by the tests and for
small graphs. ``folded_eigensolve`` finds the eigenpairs nearest a target
``mu`` by running block LOBPCG on the folded operator ``(L - mu I)^2``, which
turns the interior of the spectrum into its lower edge while touching ``L``
only through matrix-block products.
"""
from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from qdc._rng import substream

DENSE_LIMIT = 2000
RETRY_SHIFT = 1e-6
CLUSTER_GAP = 1e-9
MAX_BLOCK = 64

_CACHE_MAGIC = b"QDCEIG01"


class EigenSolverError(RuntimeError):
    """The folded solver did not converge, even after the shifted retry."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals


@dataclass
class SolverMeta:
    method: str
    iterations: int = 0
    residual_norms: np.ndarray = field(default_factory=lambda: np.empty(0))
    converged: bool = True
    retry_applied: bool = False
    restarts: int = 0


@dataclass
class EigenSystem:
    """A band of eigenpairs ``(E_a, phi_a)`` of L."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    target: float | None
    meta: SolverMeta

    @property
    def k(self):
        return int(self.eigenvalues.shape[0])

    @property
    def dim(self):
        return int(self.eigenvectors.shape[0])


def _as_dense(L):
    return L.to_dense() if hasattr(L, "to_dense") else np.asarray(L, dtype=np.float64)


def _matmat(L, V):
    return L.matmat(V) if hasattr(L, "matmat") else np.asarray(L) @ V


def residual_norms(L, values, vectors):
    return np.linalg.norm(_matmat(L, vectors) - vectors * values, axis=0)


def dense_eigensolve(L, dense_limit=DENSE_LIMIT):
    """All eigenpairs of ``L``, eigenvalues ascending."""
    n = L.dim if hasattr(L, "dim") else np.asarray(L).shape[0]
    if n > dense_limit:
        raise ValueError(f"dense eigensolve limited to N <= {dense_limit}, got N = {n}")
    vals, vecs = sla.eigh(_as_dense(L))
    meta = SolverMeta("dense", residual_norms=residual_norms(L, vals, vecs))
    return EigenSystem(vals, vecs, None, meta)


def folded_matmat(L, V, mu):
    """``(L - mu I)^2 V`` composed as ``L(LV) - 2 mu LV + mu^2 V``."""
    LV = _matmat(L, V)
    return _matmat(L, LV) - 2.0 * mu * LV + mu * mu * V


def _project_out(V, Y):
    if Y is not None and Y.shape[1]:
        V = V - Y @ (Y.T @ V)
        V = V - Y @ (Y.T @ V)
    return V


def _orthonormalize(V, rtol=1e-7):
    """Orthonormal basis of range(V), dropping numerically dependent columns.

    Columns are scaled to unit norm, then orthonormalized twice through the
    eigendecomposition of the small Gram matrix (cheaper than an SVD of the
    tall block). Directions with relative singular value below ``rtol`` are
    dropped; an SVD is the fallback if the result is not orthonormal.
    """
    if V.shape[1] == 0:
        return V
    norms = np.linalg.norm(V, axis=0)
    nz = norms > 0
    if not nz.any():
        return V[:, :0]
    W = V[:, nz] / norms[nz]
    for _ in range(2):
        G = W.T @ W
        lam, U = sla.eigh(0.5 * (G + G.T))
        keep = lam > rtol * rtol * lam[-1]
        W = (W @ U[:, keep]) / np.sqrt(lam[keep])
    if W.shape[1] and np.max(np.abs(W.T @ W - np.eye(W.shape[1]))) < 1e-12:
        return W
    U, sv, _ = np.linalg.svd(V[:, nz] / norms[nz], full_matrices=False)
    return U[:, sv > rtol * sv[0]]


def _lobpcg(apply_op, X0, Y, n_want, tol, max_iter):
    """Smallest eigenpairs of a symmetric operator on the complement of ``Y``.

    Returns ``(theta, X, iterations, residuals, converged)``; only the first
    ``n_want`` columns must meet the tolerance, the rest act as guards.
    """
    X = _orthonormalize(_project_out(X0, Y))
    nb = X.shape[1]
    AX = apply_op(X)
    theta, C = sla.eigh(X.T @ AX)
    X, AX = X @ C, AX @ C
    P = None
    res = np.full(nb, np.inf)
    for it in range(1, max_iter + 1):
        R = AX - X * theta
        res = np.linalg.norm(R, axis=0)
        done = res <= tol * (1.0 + np.abs(theta))
        if np.all(done[:n_want]):
            return theta, X, it, res, True
        active = ~done
        W = R[:, active]
        rest = W if P is None else np.hstack([W, P])
        rest = _orthonormalize(_project_out(_project_out(rest, Y), X))
        if rest.shape[1] == 0:
            # search space exhausted; Ritz pairs are exact in this subspace
            return theta, X, it, res, bool(np.all(done[:n_want]))
        A_rest = apply_op(rest)
        S = np.hstack([X, rest])
        AS = np.hstack([AX, A_rest])
        G = S.T @ AS
        G = 0.5 * (G + G.T)
        vals, V = sla.eigh(G)
        vals, V = vals[:nb], V[:, :nb]
        X_new = S @ V
        AX_new = AS @ V
        # implicit conjugate direction: the non-X part of the new Ritz vectors
        P = rest @ V[nb:, :]
        X, AX, theta = X_new, AX_new, vals
        if it % 25 == 0:
            # refresh against drift in the tracked products
            X = _orthonormalize(_project_out(X, Y))
            if X.shape[1] < nb:
                X = np.hstack([X, _orthonormalize(_project_out(
                    np.random.default_rng(it).standard_normal((X.shape[0], nb - X.shape[1])),
                    np.hstack([Y, X]) if Y is not None else X))])
            AX = apply_op(X)
            theta, C = sla.eigh(0.5 * (X.T @ AX + (X.T @ AX).T))
            X, AX = X @ C, AX @ C
            P = None
    R = AX - X * theta
    res = np.linalg.norm(R, axis=0)
    done = res <= tol * (1.0 + np.abs(theta))
    return theta, X, max_iter, res, bool(np.all(done[:n_want]))


def _guard_count(bs):
    return max(16, bs // 4)


def _solve_folded(L, n, mu, k, tol, max_iter, rng, block_size):
    """Deflated LOBPCG rounds until ``k`` folded eigenpairs are locked.

    Each round carries guard vectors beyond the wanted block. After the last
    round, converged guards whose Rayleigh quotient joins a degenerate
    eigenvalue cluster of the kept set (gap < 1e-9) are kept as well, so a
    cluster is never split by the cutoff.
    """
    apply_op = lambda V: folded_matmat(L, V, mu)  # noqa: E731
    found = np.empty((n, 0))
    total_iters = 0
    restarts = 0
    while found.shape[1] < k:
        remaining = k - found.shape[1]
        bs = min(remaining, block_size)
        nb = min(bs + _guard_count(bs), n - found.shape[1])
        X0 = rng.standard_normal((n, nb))
        theta, X, its, res, ok = _lobpcg(apply_op, X0, found, bs, tol, max_iter)
        total_iters += its
        restarts += 1
        if not ok:
            return None, total_iters, res, restarts
        found = np.hstack([found, X[:, :bs]])
    vals, vecs = _rayleigh_ritz(L, found, mu)
    start = bs
    while found.shape[1] < n:
        n_before = found.shape[1]
        found, exhausted = _join_cluster(L, found, vals, X, theta, res, start, tol)
        if found.shape[1] > n_before:
            vals, vecs = _rayleigh_ritz(L, found, mu)
        if not exhausted or found.shape[1] >= n:
            break
        # every guard joined the cluster: probe one more pair
        nb = min(1 + _guard_count(1), n - found.shape[1])
        theta, X, its, res, ok = _lobpcg(apply_op, rng.standard_normal((n, nb)),
                                         found, 1, tol, max_iter)
        total_iters += its
        restarts += 1
        if not ok:
            break
        start = 0
    return (vals, vecs), total_iters, None, restarts


def _join_cluster(L, found, vals, X, theta, res, start, tol):
    """Append converged Ritz vectors ``X[:, start:]`` that extend a cluster."""
    for j in range(start, X.shape[1]):
        if res[j] > tol * (1.0 + abs(theta[j])):
            return found, False
        xj = X[:, j:j + 1]
        e_j = float((xj.T @ _matmat(L, xj))[0, 0])
        if np.min(np.abs(vals - e_j)) >= CLUSTER_GAP:
            return found, False
        found = np.hstack([found, xj])
    return found, True


def _rayleigh_ritz(L, V, mu):
    """Rotate ``V`` to diagonalize L on its span; sort by distance to ``mu``."""
    V = _orthonormalize(V)
    LV = _matmat(L, V)
    H = V.T @ LV
    H = 0.5 * (H + H.T)
    vals, C = sla.eigh(H)
    vecs = V @ C
    order = np.lexsort((vals, np.abs(vals - mu)))
    return vals[order], vecs[:, order]


def folded_eigensolve(L, mu, k, tol=1e-6, max_iter=500, seed=0, block_size=MAX_BLOCK):
    """The ``k`` eigenpairs of ``L`` nearest ``mu``.

    Runs LOBPCG (no preconditioner) on ``(L - mu I)^2``; if that fails to
    converge the whole solve is retried once with ``mu + 1e-6``. Eigenvalues
    are Rayleigh quotients of L on the converged subspace, sorted by
    ``|E - mu|``. If the k-th pair sits inside a degenerate cluster the
    whole cluster is returned, so ``k`` may grow.
    """
    n = L.dim if hasattr(L, "dim") else np.asarray(L).shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    if tol <= 0:
        raise ValueError("tol must be positive")
    retry = False
    shift = mu
    iters = 0
    for attempt in range(2):
        rng = substream(seed, "lobpcg", attempt)
        result, its, res, restarts = _solve_folded(L, n, shift, k, tol, max_iter, rng,
                                                   min(k, block_size))
        iters += its
        if result is not None:
            vals, vecs = result
            order = np.lexsort((vals, np.abs(vals - mu)))
            vals, vecs = vals[order], vecs[:, order]
            meta = SolverMeta(
                "folded-lobpcg",
                iterations=iters,
                residual_norms=residual_norms(L, vals, vecs),
                converged=True,
                retry_applied=retry,
                restarts=restarts,
            )
            return EigenSystem(vals, vecs, float(mu), meta)
        retry = True
        shift = mu + RETRY_SHIFT
    raise EigenSolverError(
        f"folded LOBPCG did not converge for mu={mu}, k={k} after retry", residuals=res
    )


def eigensystem_for_kernel(L, mu, k, tol=1e-6, seed=0, cache_dir=None, graph_hash=None):
    """Eigenpairs for kernel assembly.

    When the budget covers the whole spectrum of a small graph the dense
    decomposition is used (identical span, no iteration). Results are cached
    on disk when ``cache_dir`` (or ``QDC_CACHE_DIR``) is set.
    """
    n = L.dim
    cache_dir = cache_dir or os.environ.get("QDC_CACHE_DIR")
    full = k >= n and n <= DENSE_LIMIT
    key_mu = 0.0 if full else float(mu)
    path = None
    if cache_dir and graph_hash:
        path = cache_path(cache_dir, graph_hash, key_mu, min(k, n), tol)
        if path.is_file():
            es = read_eigen_cache(path)
            es.target = None if full else float(mu)
            return es
    es = dense_eigensolve(L) if full else folded_eigensolve(L, mu, k, tol=tol, seed=seed)
    if path is not None:
        write_eigen_cache(path, es, key_mu, tol)
    return es


def band_from_dense(es, mu, k):
    """The ``k`` pairs of a full dense system nearest ``mu``, sorted by distance.

    A degenerate cluster cut by the k-th pair is included whole.
    """
    dist = np.abs(es.eigenvalues - mu)
    order = np.argsort(dist, kind="stable")
    k = min(k, order.size)
    vals = es.eigenvalues
    pick = order[:k]
    if k:
        # whole cluster of every kept value (pairs of the boundary cluster may interleave)
        near = np.abs(vals[:, None] - vals[pick][None, :]).min(axis=1) < CLUSTER_GAP
        extra = np.setdiff1d(np.flatnonzero(near), pick)
        pick = np.concatenate([pick, extra[np.argsort(dist[extra], kind="stable")]])
    res = es.meta.residual_norms
    meta = SolverMeta("dense-band", residual_norms=res[pick] if res.size == vals.size else res)
    return EigenSystem(es.eigenvalues[pick], es.eigenvectors[:, pick], float(mu), meta)


def cache_path(cache_dir, graph_hash, mu, k, tol):
    key = f"{graph_hash}|{mu!r}|{k}|{tol!r}".encode()
    return Path(cache_dir) / f"eig-{hashlib.sha256(key).hexdigest()[:32]}.bin"


def write_eigen_cache(path, es, mu, tol):
    """Header ``{N, k, mu, tol}``, eigenvalues, column-major Phi; little-endian."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, k = es.eigenvectors.shape
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<qqdd", n, k, float(mu), float(tol)))
        fh.write(np.asarray(es.eigenvalues, dtype="<f8").tobytes())
        fh.write(np.asarray(es.eigenvectors, dtype="<f8").tobytes(order="F"))


def read_eigen_cache(path):
    with open(path, "rb") as fh:
        if fh.read(8) != _CACHE_MAGIC:
            raise ValueError(f"{path}: not an eigen cache file")
        n, k, mu, tol = struct.unpack("<qqdd", fh.read(32))
        vals = np.frombuffer(fh.read(8 * k), dtype="<f8").astype(np.float64)
        vecs = np.frombuffer(fh.read(8 * n * k), dtype="<f8").reshape((n, k), order="F")
    meta = SolverMeta("cache")
    return EigenSystem(vals, np.array(vecs, dtype=np.float64), float(mu), meta)
