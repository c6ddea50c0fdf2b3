import numpy as np
import pytest

from qdc.graph import GraphDataset, canonical_edges


def random_connected_graph(n, rng, mean_degree=4.0, n_classes=3, n_features=5):
    """Random spanning tree plus Erdos-Renyi extras; always connected."""
    perm = rng.permutation(n)
    tree = [(perm[i], perm[rng.integers(0, i)]) for i in range(1, n)]
    extra = rng.integers(0, n, size=(int(n * mean_degree / 2), 2))
    pairs = np.vstack([np.array(tree, dtype=np.int64).reshape(-1, 2), extra])
    edges, _, _ = canonical_edges(pairs)
    labels = np.arange(n) % n_classes
    rng.shuffle(labels)
    return GraphDataset(n, edges, rng.normal(size=(n, n_features)), labels)


def path_graph(n):
    return GraphDataset(n, [(i, i + 1) for i in range(n - 1)], np.eye(n), np.zeros(n, dtype=int))


def complete_graph(n, labels=None):
    edges = [(i, j) for i in range(n) for j in range(i + 1, n)]
    labels = np.zeros(n, dtype=int) if labels is None else np.asarray(labels)
    return GraphDataset(n, edges, np.eye(n), labels)


def two_cliques(m=6):
    """Two disjoint K_m with one-hot class features: linearly separable."""
    edges = [(i, j) for i in range(m) for j in range(i + 1, m)]
    edges += [(i + m, j + m) for i, j in edges]
    labels = np.array([0] * m + [1] * m)
    return GraphDataset(2 * m, edges, np.eye(2)[labels], labels)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
