import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qdc.graph import normalized_operator
from qdc.spectral import (CLUSTER_GAP, EigenSolverError, band_from_dense, dense_eigensolve,
                          eigensystem_for_kernel, folded_eigensolve, folded_matmat,
                          read_eigen_cache, write_eigen_cache)

from conftest import complete_graph, path_graph, random_connected_graph

# eigenvalues of the self-loop normalized P10 nearest 0, from numpy.linalg.eigvalsh
P10_NEAREST_ZERO = [-0.23729622308507572, -0.11137133906366267, 0.0625430136926478, 0.26920018732192313]


def cluster_projectors(values, vectors, gap=1e-6):
    order = np.argsort(values)
    values, vectors = values[order], vectors[:, order]
    breaks = np.flatnonzero(np.diff(values) >= gap) + 1
    return [(values[idx].mean(), vectors[:, idx] @ vectors[:, idx].T)
            for idx in np.split(np.arange(values.size), breaks)]


def test_dense_examples(rng):
    es = dense_eigensolve(normalized_operator(complete_graph(3)))
    assert np.allclose(es.eigenvalues, [0, 0, 1], atol=1e-12)
    es2 = dense_eigensolve(normalized_operator(complete_graph(2)))
    assert np.allclose(es2.eigenvalues, [0, 1], atol=1e-12)
    es50 = dense_eigensolve(normalized_operator(random_connected_graph(50, rng)))
    assert np.allclose(es50.eigenvectors.T @ es50.eigenvectors, np.eye(50), atol=1e-10)
    with pytest.raises(ValueError):
        dense_eigensolve(normalized_operator(path_graph(5)), dense_limit=4)


def test_folded_k3():
    es = folded_eigensolve(normalized_operator(complete_graph(3)), mu=1.0, k=1)
    assert es.eigenvalues[0] == pytest.approx(1.0, abs=1e-10)
    assert np.allclose(np.abs(es.eigenvectors[:, 0]), 1 / np.sqrt(3), atol=1e-8)


def test_folded_path_matches_frozen_values():
    es = folded_eigensolve(normalized_operator(path_graph(10)), mu=0.0, k=4, tol=1e-8)
    assert np.allclose(np.sort(es.eigenvalues), P10_NEAREST_ZERO, atol=1e-8)
    # sorted by distance to the target
    assert np.all(np.diff(np.abs(es.eigenvalues)) >= 0)


def test_folded_invariants(rng):
    g = random_connected_graph(120, rng)
    L = normalized_operator(g)
    es = folded_eigensolve(L, mu=0.3, k=10, seed=4)
    Phi = es.eigenvectors
    assert np.allclose(Phi.T @ Phi, np.eye(Phi.shape[1]), atol=1e-8)
    res = np.linalg.norm(L.to_dense() @ Phi - Phi * es.eigenvalues, axis=0)
    assert np.all(res <= 1e-6 * 10)
    # eigenvalues are Rayleigh quotients
    assert np.allclose(es.eigenvalues, np.einsum("ia,ij,ja->a", Phi, L.to_dense(), Phi), atol=1e-12)
    dense = dense_eigensolve(L).eigenvalues
    assert np.all(np.min(np.abs(dense[:, None] - es.eigenvalues[None, :]), axis=0) < 1e-8)


def test_folded_full_spectrum_projectors(rng):
    L = normalized_operator(random_connected_graph(40, rng))
    es = folded_eigensolve(L, mu=0.0, k=40)
    ref = dense_eigensolve(L)
    got = cluster_projectors(es.eigenvalues, es.eigenvectors)
    want = cluster_projectors(ref.eigenvalues, ref.eigenvectors)
    assert len(got) == len(want)
    for (eg, Pg), (ew, Pw) in zip(got, want):
        assert eg == pytest.approx(ew, abs=1e-8)
        assert np.linalg.norm(Pg - Pw) < 1e-6


def test_folded_deterministic(rng):
    L = normalized_operator(random_connected_graph(80, rng))
    a = folded_eigensolve(L, mu=-0.2, k=6, seed=7)
    b = folded_eigensolve(L, mu=-0.2, k=6, seed=7)
    assert np.array_equal(a.eigenvalues, b.eigenvalues)
    assert np.array_equal(a.eigenvectors, b.eigenvectors)


def test_degenerate_cluster_extended():
    # K6: eigenvalue 0 has multiplicity 5, so asking for 2 pairs near 0 returns all 5
    es = folded_eigensolve(normalized_operator(complete_graph(6)), mu=0.0, k=2)
    assert es.k == 5
    assert np.allclose(es.eigenvalues, 0, atol=1e-10)


def test_folded_matmat_composition(rng):
    L = normalized_operator(random_connected_graph(30, rng))
    V = rng.normal(size=(30, 3))
    D = L.to_dense()
    M = (D - 0.4 * np.eye(30)) @ (D - 0.4 * np.eye(30))
    assert np.allclose(folded_matmat(L, V, 0.4), M @ V, atol=1e-13)


def test_failure_after_retry(rng):
    L = normalized_operator(random_connected_graph(400, rng))
    with pytest.raises(EigenSolverError) as info:
        folded_eigensolve(L, mu=0.1, k=8, tol=1e-12, max_iter=2)
    assert info.value.residuals is not None and np.all(np.isfinite(info.value.residuals))


def test_retry_shifts_target(rng, monkeypatch):
    import qdc.spectral as spectral
    real = spectral._solve_folded
    shifts = []

    def flaky(L, n, mu, *args):
        shifts.append(mu)
        if len(shifts) == 1:
            return None, 3, np.ones(1), 1
        return real(L, n, mu, *args)

    monkeypatch.setattr(spectral, "_solve_folded", flaky)
    L = normalized_operator(random_connected_graph(50, rng))
    es = folded_eigensolve(L, mu=0.2, k=3)
    assert shifts == [0.2, 0.2 + 1e-6]
    assert es.meta.retry_applied and es.target == 0.2


def test_bad_arguments():
    L = normalized_operator(path_graph(4))
    with pytest.raises(ValueError):
        folded_eigensolve(L, 0.0, k=5)
    with pytest.raises(ValueError):
        folded_eigensolve(L, 0.0, k=2, tol=0)


def test_cache_round_trip(tmp_path, rng, monkeypatch):
    L = normalized_operator(random_connected_graph(25, rng))
    es = folded_eigensolve(L, mu=0.2, k=5)
    write_eigen_cache(tmp_path / "e.bin", es, 0.2, 1e-6)
    back = read_eigen_cache(tmp_path / "e.bin")
    assert np.array_equal(back.eigenvalues, es.eigenvalues)
    assert np.array_equal(back.eigenvectors, es.eigenvectors)
    raw = (tmp_path / "e.bin").read_bytes()
    assert raw[:8] == b"QDCEIG01"
    assert np.frombuffer(raw[8:24], "<i8").tolist() == [25, es.k]
    # column-major eigenvectors follow the eigenvalues
    off = 40 + 8 * es.k
    assert np.array_equal(np.frombuffer(raw[off:off + 200], "<f8"), es.eigenvectors[:, 0])
    monkeypatch.setenv("QDC_CACHE_DIR", str(tmp_path / "cache"))
    first = eigensystem_for_kernel(L, 0.2, 5, graph_hash="abc")
    assert len(list((tmp_path / "cache").iterdir())) == 1
    second = eigensystem_for_kernel(L, 0.2, 5, graph_hash="abc")
    assert second.meta.method == "cache"
    assert np.array_equal(first.eigenvectors, second.eigenvectors)


def test_band_from_dense(rng):
    L = normalized_operator(complete_graph(6))
    full = dense_eigensolve(L)
    band = band_from_dense(full, 0.1, 2)
    assert band.k == 5  # the whole zero cluster
    band1 = band_from_dense(full, 0.9, 1)
    assert band1.eigenvalues[0] == pytest.approx(1.0)
    L2 = normalized_operator(random_connected_graph(50, rng))
    d = dense_eigensolve(L2)
    b = band_from_dense(d, -0.3, 7)
    f = folded_eigensolve(L2, -0.3, 7)
    assert np.allclose(np.sort(b.eigenvalues), np.sort(f.eigenvalues), atol=1e-8)


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(10, 150), mu=st.floats(-0.95, 0.95), k=st.integers(1, 8))
def test_folded_subset_of_dense(seed, n, mu, k):
    L = normalized_operator(random_connected_graph(n, np.random.default_rng(seed)))
    es = folded_eigensolve(L, mu=mu, k=k, seed=seed)
    dense = dense_eigensolve(L).eigenvalues
    assert es.k >= k
    assert np.all(np.min(np.abs(dense[:, None] - es.eigenvalues[None, :]), axis=0) < 1e-8)
    # nearest mu: nothing left out is strictly closer than the farthest kept value
    dist = np.sort(np.abs(dense - mu))
    assert np.max(np.abs(es.eigenvalues - mu)) <= dist[es.k - 1] + 1e-8
    assert CLUSTER_GAP > 0
