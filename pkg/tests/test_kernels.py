import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm

from qdc.graph import GraphDataset, SparseMatrix, normalized_operator
from qdc.kernels import (KernelSpec, assemble_kernel, bandpass_filter_weights, build_kernel,
                         dense_kernel, gaussian_filter_weights, gdc_baseline, load_kernel,
                         quantum_kernel, renormalize, save_kernel, sparsify)
from qdc.spectral import EigenSystem, SolverMeta, dense_eigensolve, folded_eigensolve

from conftest import complete_graph, path_graph, random_connected_graph

# rows 0 and 1 of alpha (I - (1 - alpha) L)^-1 for P4, alpha = 0.15 (numpy.linalg.inv)
P4_PPR = [[0.41741343561175726, 0.2593944091473914, 0.1448903056809001, 0.08744093332028156],
          [0.25939440914739137, 0.4298185507194788, 0.24008436190188034, 0.14489030568090006]]
# row 0 of the gaussian kernel on P4, mu = 0.5, sigma = 0.3 (explicit outer-product sum)
P4_GAUSS_ROW0 = [0.5025275028708619, 0.07722680794637075, -0.21932430363006883, -0.07914211501736775]
# row 0 of expm(-2 (I - L)) for P4 (scipy.linalg.expm)
P4_HEAT_ROW0 = [0.48809326490041915, 0.30434546488077285, 0.09302271331334315, 0.02523209680211819]


def blocks_of(Q, rows=2):
    return [(r, Q[r:r + rows]) for r in range(0, Q.shape[0], rows)]


def test_gaussian_weights():
    assert gaussian_filter_weights([0.3], 0.3, 0.2)[0] == 1.0
    assert gaussian_filter_weights([0.5], 0.3, 0.2)[0] == pytest.approx(math.exp(-0.5), rel=1e-14)
    assert gaussian_filter_weights([0.9], 0.3, 0.2)[0] == pytest.approx(math.exp(-4.5), rel=1e-12)
    with pytest.raises(ValueError):
        gaussian_filter_weights([0.0], 0.0, 0.0)


def test_bandpass_weights():
    sig = lambda x: 1 / (1 + math.exp(-x))  # noqa: E731
    assert bandpass_filter_weights([0.2], 0.2, 0.5)[0] == pytest.approx(sig(0.5) ** 2, rel=1e-14)
    # saturation: 1 - w is about 2 exp(-gamma), below 1e-6 once gamma > ln(2e6) ~ 14.51
    assert 1 - bandpass_filter_weights([0.2], 0.2, 14.0)[0] == pytest.approx(2 * math.exp(-14), rel=1e-5)
    assert bandpass_filter_weights([0.2], 0.2, 15.0)[0] == pytest.approx(1.0, abs=1e-6)
    assert bandpass_filter_weights([0.7], 0.2, 0.5)[0] == pytest.approx(sig(1.0) / 2, rel=1e-14)
    E = np.linspace(-1, 1, 41)
    w = bandpass_filter_weights(E, 0.0, 0.3)
    assert np.allclose(w, w[::-1], atol=1e-15) and np.all((w > 0) & (w < 1))


def test_kernel_spec_validation():
    KernelSpec("gaussian", mu=0.1, sigma=0.2, eps=1e-3)
    with pytest.raises(ValueError):
        KernelSpec("gaussian", mu=0.1, eps=1e-3)
    with pytest.raises(ValueError):
        KernelSpec("gaussian", mu=0.1, sigma=0.2)
    with pytest.raises(ValueError):
        KernelSpec("gaussian", mu=0.1, sigma=0.2, eps=1e-3, topk=3)
    with pytest.raises(ValueError):
        KernelSpec("ppr", alpha=0.1, sigma=0.2, eps=1e-3)
    with pytest.raises(ValueError):
        KernelSpec("heat", t=-1, eps=0.1)
    with pytest.raises(ValueError):
        KernelSpec("bandpass", mu=0, gamma=0.1, topk=0)


def test_k3_kernel_uniform():
    es = dense_eigensolve(normalized_operator(complete_graph(3)))
    w = gaussian_filter_weights(es.eigenvalues, 1.0, 0.1)
    assert np.all(w[:2] <= math.exp(-50) + 1e-30)
    Q = dense_kernel(es, w)
    assert np.allclose(Q, np.full((3, 3), 1 / 3), atol=1e-15)


def test_single_vertex_kernel():
    es = dense_eigensolve(normalized_operator(GraphDataset(1, [], np.zeros((1, 1)), [0])))
    Q = dense_kernel(es, gaussian_filter_weights(es.eigenvalues, 0.4, 0.5))
    assert Q[0, 0] == pytest.approx(math.exp(-(0.6 ** 2) / 0.5), rel=1e-14)


def test_frozen_p4_gaussian():
    es = dense_eigensolve(normalized_operator(path_graph(4)))
    Q = dense_kernel(es, gaussian_filter_weights(es.eigenvalues, 0.5, 0.3))
    assert np.allclose(Q[0], P4_GAUSS_ROW0, atol=1e-13)


def test_folded_vs_dense_assembly_100(rng):
    L = normalized_operator(random_connected_graph(100, rng))
    dense = dense_eigensolve(L)
    folded = folded_eigensolve(L, mu=0.2, k=100)
    wd = gaussian_filter_weights(dense.eigenvalues, 0.2, 0.3)
    wf = gaussian_filter_weights(folded.eigenvalues, 0.2, 0.3)
    assert np.linalg.norm(dense_kernel(dense, wd) - dense_kernel(folded, wf)) <= 1e-6


def test_assembly_blocks_and_errors(rng):
    es = dense_eigensolve(normalized_operator(random_connected_graph(30, rng)))
    w = gaussian_filter_weights(es.eigenvalues, 0.0, 0.5)
    blocks = list(assemble_kernel(es, w, block_rows=7))
    assert [r for r, _ in blocks] == [0, 7, 14, 21, 28]
    assert np.allclose(np.vstack([b for _, b in blocks]), dense_kernel(es, w), atol=1e-14)
    with pytest.raises(ValueError):
        list(assemble_kernel(es, w[:-1]))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(2, 80), mu=st.floats(-1, 1), sigma=st.floats(0.05, 1))
def test_kernel_psd_and_symmetric(seed, n, mu, sigma):
    rng = np.random.default_rng(seed)
    es = dense_eigensolve(normalized_operator(random_connected_graph(n, rng)))
    Q = dense_kernel(es, gaussian_filter_weights(es.eigenvalues, mu, sigma))
    assert np.array_equal(Q, Q.T)
    V = rng.normal(size=(n, 100))
    assert np.min(np.einsum("ia,ij,ja->a", V, Q, V)) >= -1e-10


def test_rotation_invariance():
    # K5 plus a pendant path: the zero eigenvalue of the clique part is degenerate
    L = normalized_operator(complete_graph(5))
    es = dense_eigensolve(L)
    w = gaussian_filter_weights(es.eigenvalues, 0.1, 0.4)
    idx = np.flatnonzero(np.abs(es.eigenvalues) < 1e-9)
    assert idx.size == 4
    R, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(idx.size, idx.size)))
    Phi = es.eigenvectors.copy()
    Phi[:, idx] = Phi[:, idx] @ R
    Phi[:, -1] *= -1
    rotated = EigenSystem(es.eigenvalues, Phi, None, SolverMeta("test"))
    assert np.allclose(dense_kernel(es, w), dense_kernel(rotated, w), atol=1e-10)


def test_sparsify_threshold_examples():
    Q = np.array([[0.9, 1e-8], [1e-8, 0.9]])
    S, before = sparsify(blocks_of(Q), 2, eps=1e-7)
    assert np.array_equal(S.to_dense(), np.diag([0.9, 0.9])) and before == 4
    rng = np.random.default_rng(1)
    M = rng.normal(size=(6, 6))
    M = M + M.T
    S0, _ = sparsify(blocks_of(M), 6, eps=0.0)
    assert S0.nnz == 36 and np.array_equal(S0.to_dense(), M)


def test_sparsify_keeps_sign():
    Q = np.array([[1.0, -0.5], [-0.5, 1.0]])
    S, _ = sparsify(blocks_of(Q), 2, eps=0.1)
    assert S.to_dense()[0, 1] == -0.5


def test_sparsify_topk_hand_oracle():
    Q = np.array([[0.9, 0.5, 0.1],
                  [0.5, 0.2, 0.7],
                  [0.1, 0.7, 0.3]])
    S, _ = sparsify(blocks_of(Q), 3, topk=1)
    # row picks: (0,0), (1,2), (2,1); union is symmetric
    expected = np.array([[0.9, 0, 0], [0, 0, 0.7], [0, 0.7, 0]])
    assert np.array_equal(S.to_dense(), expected)
    assert S.nnz <= 6


def test_sparsify_topk_union_asymmetric_choice():
    Q = np.array([[0.1, 0.8, 0.9],
                  [0.8, 1.0, 0.2],
                  [0.9, 0.2, 0.05]])
    S, _ = sparsify(blocks_of(Q), 3, topk=1)
    D = S.to_dense()
    # row 0 keeps (0,2), row 1 keeps (1,1), row 2 keeps (2,0)
    assert np.array_equal(D, np.array([[0, 0, 0.9], [0, 1.0, 0], [0.9, 0, 0]]))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(2, 40), k=st.integers(1, 6))
def test_sparsify_symmetric_and_monotone(seed, n, k):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(n, n)) * rng.random((n, n)) ** 4
    M = 0.5 * (M + M.T)
    epss = np.sort(rng.random(4)) * 0.3
    nnz = []
    for eps in epss:
        S, _ = sparsify(blocks_of(M, 3), n, eps=float(eps))
        assert S.is_symmetric()
        nnz.append(S.nnz)
    assert all(a >= b for a, b in zip(nnz, nnz[1:]))
    T, _ = sparsify(blocks_of(M, 5), n, topk=k)
    assert T.is_symmetric()
    D = T.to_dense()
    # every row's own top-k picks survive with their values
    for i in range(n):
        picks = np.argsort(-np.abs(M[i]), kind="stable")[:k]
        assert np.array_equal(D[i, picks], M[i, picks])


def test_renormalize_examples():
    A = renormalize(SparseMatrix.from_dense([[0, 2], [2, 0]]))
    assert np.array_equal(A.to_dense(), [[0, 1], [1, 0]])
    B = renormalize(SparseMatrix.from_dense(np.diag([0.9, 0.9])))
    assert np.allclose(B.to_dense(), np.eye(2), atol=1e-15)
    C = renormalize(SparseMatrix.from_dense([[1.0, 0, 0], [0, 0, 0], [0, 0, 2.0]]))
    assert np.all(np.isfinite(C.data)) and C.to_dense()[1].tolist() == [0, 0, 0]


def test_renormalize_signed_and_idempotent(rng):
    M = rng.normal(size=(8, 8))
    M = M + M.T
    R = renormalize(SparseMatrix.from_dense(M))
    assert R.is_symmetric()
    D = np.abs(M).sum(axis=1)
    assert np.allclose(R.to_dense(), M / np.sqrt(np.outer(D, D)), atol=1e-15)
    P = SparseMatrix.from_dense([[0.5, 0.5, 0], [0.5, 0, 0.5], [0, 0.5, 0.5]])
    assert np.allclose(renormalize(renormalize(P)).to_dense(), P.to_dense(), atol=1e-12)


def test_quantum_kernel_pipeline(rng):
    L = normalized_operator(random_connected_graph(60, rng))
    spec = KernelSpec("gaussian", mu=0.4, sigma=0.2, eps=1e-3, eigen_budget=20)
    K = quantum_kernel(L, spec)
    assert K.matrix.is_symmetric() and np.all(np.isfinite(K.matrix.data))
    assert K.provenance["eigen"]["k"] >= 20
    assert K.provenance["nnz_after"] == K.matrix.nnz <= K.provenance["nnz_before"]
    # same kernel from the dense band oracle
    es = dense_eigensolve(L)
    near = np.argsort(np.abs(es.eigenvalues - 0.4))[:K.provenance["eigen"]["k"]]
    ref = EigenSystem(es.eigenvalues[near], es.eigenvectors[:, near], 0.4, SolverMeta("dense"))
    Kd = quantum_kernel(L, spec, eigensystem=ref)
    assert np.allclose(K.matrix.to_dense(), Kd.matrix.to_dense(), atol=1e-6)


def test_bandpass_kernel(rng):
    L = normalized_operator(random_connected_graph(30, rng))
    K = build_kernel(L, KernelSpec("bandpass", mu=-0.2, gamma=0.3, topk=4))
    assert K.matrix.is_symmetric()
    assert np.all(np.diff(K.matrix.indptr) >= 4 - 0)


def test_ppr_frozen_and_dense_oracle():
    L = normalized_operator(path_graph(4))
    S = np.vstack([b for _, b in __import__("qdc.kernels", fromlist=["x"]).diffusion_blocks(
        L, KernelSpec("ppr", alpha=0.15, eps=0.0), block_rows=3)])
    assert np.allclose(S[:2], P4_PPR, atol=1e-8)
    dense = 0.15 * np.linalg.inv(np.eye(4) - 0.85 * L.to_dense())
    assert np.allclose(S, dense, atol=1e-8)


def test_ppr_alpha_one_is_identity():
    L = normalized_operator(path_graph(5))
    K = gdc_baseline(L, KernelSpec("ppr", alpha=1.0, eps=1e-12))
    assert np.allclose(K.matrix.to_dense(), np.eye(5), atol=1e-14)


def test_heat_frozen_and_limit():
    from qdc.kernels import diffusion_blocks
    L = normalized_operator(path_graph(4))
    H = np.vstack([b for _, b in diffusion_blocks(L, KernelSpec("heat", t=2.0, eps=0.0))])
    assert np.allclose(H[0], P4_HEAT_ROW0, atol=1e-8)
    assert np.allclose(H, expm(-2.0 * (np.eye(4) - L.to_dense())), atol=1e-8)
    L2 = normalized_operator(complete_graph(2))
    H2 = np.vstack([b for _, b in diffusion_blocks(L2, KernelSpec("heat", t=60.0, eps=0.0))])
    assert np.allclose(H2, np.full((2, 2), 0.5), atol=1e-8)


def test_gdc_baseline_sparsified(rng):
    L = normalized_operator(random_connected_graph(40, rng))
    K = gdc_baseline(L, KernelSpec("ppr", alpha=0.1, eps=1e-3))
    assert K.matrix.is_symmetric()
    assert K.provenance["nnz_after"] <= K.provenance["nnz_before"]


def test_kernel_file_round_trip(tmp_path, rng):
    L = normalized_operator(random_connected_graph(25, rng))
    spec = KernelSpec("gaussian", mu=0.0, sigma=0.5, eps=1e-4)
    K = build_kernel(L, spec)
    save_kernel(K, tmp_path / "k.bin")
    back = load_kernel(tmp_path / "k.bin")
    assert back.spec == spec
    assert np.array_equal(back.matrix.data, K.matrix.data)
    assert np.array_equal(back.matrix.indices, K.matrix.indices)
    raw = (tmp_path / "k.bin").read_bytes()
    n, nnz, jl = np.frombuffer(raw[8:32], "<i8")
    assert (n, nnz) == (25, K.matrix.nnz)
    assert json.loads(raw[32:32 + jl]) == spec.to_dict()
    assert len(raw) == 32 + jl + 8 * (n + 1) + 16 * nnz
