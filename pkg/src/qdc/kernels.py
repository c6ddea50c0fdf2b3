"""Spectral filter kernels, sparsification and diffusion baselines.

The quantum kernel is the filter-weighted spectral projector

    Q = sum_a w(E_a) phi_a phi_a^T

with Gaussian weights ``exp(-(E - mu)^2 / (2 sigma^2))`` (or the band-pass
product of logistic sigmoids). Q is produced in row blocks so the dense
N x N matrix never has to be resident, sparsified on the fly, and
renormalized symmetrically by absolute row sums.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, gammaln

from qdc import _backend
from qdc.graph import SparseMatrix
from qdc.spectral import eigensystem_for_kernel

FAMILIES = ("gaussian", "bandpass", "heat", "ppr")
DEFAULT_BLOCK_ROWS = 1024
EIGEN_BUDGET = 512
_KERNEL_MAGIC = b"QDCKER01"


@dataclass(frozen=True)
class KernelSpec:
    family: str = "gaussian"
    mu: float | None = None
    sigma: float | None = None
    gamma: float | None = None
    alpha: float | None = None
    t: float | None = None
    eps: float | None = None
    topk: int | None = None
    eigen_budget: int | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        need = {
            "gaussian": ("mu", "sigma"),
            "bandpass": ("mu", "gamma"),
            "heat": ("t",),
            "ppr": ("alpha",),
        }
        if self.family not in need:
            raise ValueError(f"unknown kernel family {self.family!r}; expected one of {FAMILIES}")
        for name in need[self.family]:
            if getattr(self, name) is None:
                raise ValueError(f"{self.family} kernel requires {name}")
        extra = [n for n in ("mu", "sigma", "gamma", "alpha", "t")
                 if n not in need[self.family] and getattr(self, n) is not None]
        if extra:
            raise ValueError(f"{self.family} kernel does not take {extra}")
        if self.sigma is not None and self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.gamma is not None and self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.alpha is not None and not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if self.t is not None and self.t <= 0:
            raise ValueError("t must be positive")
        if (self.eps is None) == (self.topk is None):
            raise ValueError("exactly one of eps (threshold) or topk is required")
        if self.eps is not None and self.eps < 0:
            raise ValueError("eps must be >= 0")
        if self.topk is not None and self.topk < 1:
            raise ValueError("topk must be >= 1")
        if self.eigen_budget is not None and self.eigen_budget < 1:
            raise ValueError("eigen_budget must be >= 1")

    @property
    def spectral(self):
        return self.family in ("gaussian", "bandpass")

    def budget(self, n):
        return min(self.eigen_budget or EIGEN_BUDGET, n)

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class RewiredKernel:
    matrix: SparseMatrix
    spec: KernelSpec
    provenance: dict = field(default_factory=dict)


def gaussian_filter_weights(E, mu, sigma):
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    E = np.asarray(E, dtype=np.float64)
    return np.exp(-((E - mu) ** 2) / (2.0 * sigma * sigma))


def bandpass_filter_weights(E, mu, gamma):
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    E = np.asarray(E, dtype=np.float64)
    return expit(E - mu + gamma) * expit(mu + gamma - E)


def filter_weights(E, spec):
    if spec.family == "gaussian":
        return gaussian_filter_weights(E, spec.mu, spec.sigma)
    if spec.family == "bandpass":
        return bandpass_filter_weights(E, spec.mu, spec.gamma)
    raise ValueError(f"{spec.family} is not a spectral filter family")


def assemble_kernel(es, weights, block_rows=DEFAULT_BLOCK_ROWS):
    """Yield ``(row_start, block)`` pairs covering the rows of Q in order.

    Q = Phi diag(w) Phi^T; each block is an independent unit of work.
    """
    w = np.asarray(weights, dtype=np.float64)
    phi = np.asarray(es.eigenvectors, dtype=np.float64)
    if w.shape[0] != phi.shape[1]:
        raise ValueError(f"{w.shape[0]} weights for {phi.shape[1]} eigenpairs")
    n = phi.shape[0]
    phi_w = phi * w
    for r0 in range(0, n, block_rows):
        r1 = min(r0 + block_rows, n)
        yield r0, phi_w[r0:r1] @ phi.T


def dense_kernel(es, weights):
    """Whole Q as one dense array (small graphs and tests), exactly symmetric."""
    Q = np.vstack([b for _, b in assemble_kernel(es, weights, block_rows=max(es.dim, 1))])
    # a + b == b + a in floating point, so this is bitwise symmetric
    return 0.5 * (Q + Q.T)


def sparsify(blocks, n, eps=None, topk=None):
    """Sparsify a row-block stream of a symmetric matrix.

    Threshold mode drops ``|Q_ij| < eps``; top-k mode keeps the k largest
    magnitudes of each row and symmetrizes by union. Signed values are kept.
    Each unordered pair takes the value computed in its lower-index row, so
    the result is exactly symmetric. Returns ``(matrix, nnz_before)``.
    """
    if (eps is None) == (topk is None):
        raise ValueError("exactly one of eps or topk is required")
    rows_all, cols_all, vals_all = [], [], []
    nnz_before = 0
    for r0, block in blocks:
        block = np.ascontiguousarray(block, dtype=np.float64)
        nnz_before += int(np.count_nonzero(block))
        if eps is not None:
            counts, cols, vals = _backend.threshold_block(block, float(eps))
        else:
            counts, cols, vals = _backend.topk_block(block, int(topk))
        rows_all.append(np.repeat(np.arange(r0, r0 + block.shape[0], dtype=np.int64), counts))
        cols_all.append(cols)
        vals_all.append(vals)
    if not rows_all:
        return SparseMatrix(n, np.zeros(n + 1, np.int64), [], []), 0
    rows = np.concatenate(rows_all)
    cols = np.concatenate(cols_all)
    vals = np.concatenate(vals_all)
    return _symmetric_union(n, rows, cols, vals), nnz_before


def _symmetric_union(n, rows, cols, vals):
    lo = np.minimum(rows, cols)
    hi = np.maximum(rows, cols)
    from_lo_row = rows == lo
    key = lo * n + hi
    # prefer the entry computed in row lo; stable so ties keep first occurrence
    order = np.lexsort((~from_lo_row, key))
    key_sorted = key[order]
    first = np.ones(order.size, dtype=bool)
    first[1:] = key_sorted[1:] != key_sorted[:-1]
    pick = order[first]
    lo, hi, v = lo[pick], hi[pick], vals[pick]
    off = lo != hi
    r = np.concatenate([lo, hi[off]])
    c = np.concatenate([hi, lo[off]])
    v = np.concatenate([v, v[off]])
    return _coo_to_sparse(n, r, c, v)


def _coo_to_sparse(n, r, c, v):
    order = np.lexsort((c, r))
    r, c, v = r[order], c[order], v[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(r, minlength=n), out=indptr[1:])
    return SparseMatrix(n, indptr, c, v)


def renormalize(Q):
    """``D^{-1/2} Q D^{-1/2}`` with D the absolute row sums; zero rows stay zero."""
    n = Q.dim
    rows = np.repeat(np.arange(n), np.diff(Q.indptr))
    deg = np.bincount(rows, weights=np.abs(Q.data), minlength=n)
    scale = deg[rows] * deg[Q.indices]
    # d_i * d_j is commutative, so the result stays exactly symmetric
    vals = np.zeros_like(Q.data)
    nz = scale > 0
    vals[nz] = Q.data[nz] / np.sqrt(scale[nz])
    keep = vals != 0.0
    if np.all(keep):
        return SparseMatrix(n, Q.indptr, Q.indices, vals)
    return _coo_to_sparse(n, rows[keep], Q.indices[keep], vals[keep])


def quantum_kernel(L, spec, seed=0, tol=1e-6, block_rows=DEFAULT_BLOCK_ROWS,
                   cache_dir=None, graph_hash=None, eigensystem=None):
    """Full pipeline: eigenpairs near mu, filter, assemble, sparsify, renormalize."""
    if not spec.spectral:
        raise ValueError("quantum_kernel needs a gaussian or bandpass spec")
    n = L.dim
    k = spec.budget(n)
    es = eigensystem
    if es is None:
        es = eigensystem_for_kernel(L, spec.mu, k, tol=tol, seed=seed,
                                    cache_dir=cache_dir, graph_hash=graph_hash)
    w = filter_weights(es.eigenvalues, spec)
    sparse, nnz_before = sparsify(assemble_kernel(es, w, block_rows), n,
                                  eps=spec.eps, topk=spec.topk)
    mat = renormalize(sparse)
    prov = {
        "eigen": {
            "method": es.meta.method,
            "k": es.k,
            "iterations": int(es.meta.iterations),
            "converged": bool(es.meta.converged),
            "retry_applied": bool(es.meta.retry_applied),
            "max_residual": float(np.max(es.meta.residual_norms)) if es.meta.residual_norms.size else None,
        },
        "nnz_before": nnz_before,
        "nnz_after": mat.nnz,
    }
    return RewiredKernel(mat, spec, prov)


def _block_cg(apply_op, B, tol=1e-8, max_iter=10000):
    """Column-wise conjugate gradients for an SPD operator, all columns at once."""
    X = np.zeros_like(B)
    R = B.copy()
    P = R.copy()
    rs = np.einsum("ij,ij->j", R, R)
    bnorm = np.sqrt(np.einsum("ij,ij->j", B, B))
    bnorm[bnorm == 0] = 1.0
    for it in range(max_iter):
        if np.all(np.sqrt(rs) <= tol * bnorm):
            return X, it
        AP = apply_op(P)
        pap = np.einsum("ij,ij->j", P, AP)
        active = pap > 0
        step = np.where(active, rs / np.where(active, pap, 1.0), 0.0)
        X += P * step
        R -= AP * step
        rs_new = np.einsum("ij,ij->j", R, R)
        beta = np.where(rs > 0, rs_new / np.where(rs > 0, rs, 1.0), 0.0)
        P = R + P * beta
        rs = rs_new
    raise RuntimeError(f"conjugate gradients did not reach {tol} in {max_iter} iterations")


def _ppr_rows(L, alpha, r0, r1, tol):
    n = L.dim
    B = np.zeros((n, r1 - r0))
    B[np.arange(r0, r1), np.arange(r1 - r0)] = alpha
    op = lambda V: V - (1.0 - alpha) * L.matmat(V)  # noqa: E731
    X, _ = _block_cg(op, B, tol=tol)
    return X.T  # S is symmetric: columns r0:r1 are rows r0:r1


def _heat_rows(L, t, r0, r1, tol):
    """Rows of exp(-t (I - L)) = sum_m Poisson(m; t) L^m, truncated at tail < tol."""
    n = L.dim
    V = np.zeros((n, r1 - r0))
    V[np.arange(r0, r1), np.arange(r1 - r0)] = 1.0
    out = np.zeros_like(V)
    mass = 0.0
    m = 0
    while True:
        p = np.exp(-t + m * np.log(t) - gammaln(m + 1)) if t > 0 else float(m == 0)
        out += p * V
        mass += p
        # |L| <= 1 so the remaining terms are bounded by the Poisson tail
        if m > t and 1.0 - mass < tol:
            break
        V = L.matmat(V)
        m += 1
        if m > 100000:
            raise RuntimeError("heat series did not converge")
    return out.T


def diffusion_blocks(L, spec, block_rows=DEFAULT_BLOCK_ROWS, tol=1e-8):
    n = L.dim
    for r0 in range(0, n, block_rows):
        r1 = min(r0 + block_rows, n)
        if spec.family == "ppr":
            yield r0, _ppr_rows(L, spec.alpha, r0, r1, tol)
        elif spec.family == "heat":
            yield r0, _heat_rows(L, spec.t, r0, r1, tol)
        else:
            raise ValueError(f"{spec.family} is not a diffusion baseline")


def gdc_baseline(L, spec, block_rows=DEFAULT_BLOCK_ROWS, tol=1e-8):
    """Heat or personalized-PageRank diffusion of L, sparsified and renormalized."""
    sparse, nnz_before = sparsify(diffusion_blocks(L, spec, block_rows, tol), L.dim,
                                  eps=spec.eps, topk=spec.topk)
    mat = renormalize(sparse)
    return RewiredKernel(mat, spec, {"nnz_before": nnz_before, "nnz_after": mat.nnz})


def build_kernel(L, spec, **kwargs):
    if spec.spectral:
        return quantum_kernel(L, spec, **kwargs)
    kwargs = {k: v for k, v in kwargs.items() if k == "block_rows"}
    return gdc_baseline(L, spec, **kwargs)


def save_kernel(kernel, path):
    """Header {N, nnz, spec JSON}, then indptr, indices, values (little-endian 64-bit)."""
    m = kernel.matrix
    spec_json = json.dumps(kernel.spec.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_KERNEL_MAGIC)
        fh.write(struct.pack("<qqq", m.dim, m.nnz, len(spec_json)))
        fh.write(spec_json)
        fh.write(m.indptr.astype("<i8").tobytes())
        fh.write(m.indices.astype("<i8").tobytes())
        fh.write(m.data.astype("<f8").tobytes())


def load_kernel(path):
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(8) != _KERNEL_MAGIC:
            raise ValueError(f"{path}: not a kernel file")
        n, nnz, spec_len = struct.unpack("<qqq", fh.read(24))
        spec = KernelSpec(**json.loads(fh.read(spec_len)))
        indptr = np.frombuffer(fh.read(8 * (n + 1)), dtype="<i8")
        indices = np.frombuffer(fh.read(8 * nnz), dtype="<i8")
        data = np.frombuffer(fh.read(8 * nnz), dtype="<f8")
    return RewiredKernel(SparseMatrix(n, indptr, indices, data), spec, {"nnz_after": nnz})
