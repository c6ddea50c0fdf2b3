"""Heat versus Schroedinger propagation on small graphs.

Both equations are driven by the PSD operator ``I - L`` (L the self-loop
normalized adjacency), whose null space is the stationary direction. The
propagators are exact spectral expansions, evaluated at every requested time.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from qdc.graph import GraphDataset, normalized_operator


@dataclass
class PropagationRun:
    kind: str
    operator: np.ndarray
    initial_state: np.ndarray
    time_grid: np.ndarray
    snapshots: np.ndarray
    amplitude_real: np.ndarray | None = None
    amplitude_imag: np.ndarray | None = None

    def norms(self):
        """Euclidean norm of the state at each time (quantum: of psi)."""
        if self.kind == "quantum":
            return np.sqrt(self.snapshots.sum(axis=1))
        return np.linalg.norm(self.snapshots, axis=1)

    def dirichlet_energy(self):
        f = self.snapshots
        return np.einsum("ti,ij,tj->t", f, self.operator, f)


def barbell_graph(lobe_size, path_length):
    """Two complete graphs on ``lobe_size`` vertices joined by a path.

    Vertices ``0..lobe-1`` form the first lobe, the next ``path_length`` the
    bridge, the rest the second lobe. Labels mark lobe/bridge/lobe.
    """
    if lobe_size < 3 or path_length < 1:
        raise ValueError("need lobe_size >= 3 and path_length >= 1")
    m, p = lobe_size, path_length
    n = 2 * m + p
    edges = [(i, j) for i in range(m) for j in range(i + 1, m)]
    off = m + p
    edges += [(off + i, off + j) for i in range(m) for j in range(i + 1, m)]
    chain = [m - 1] + list(range(m, m + p)) + [off]
    edges += [tuple(sorted(e)) for e in zip(chain[:-1], chain[1:])]
    labels = np.array([0] * m + [1] * p + [2] * m)
    return GraphDataset(n, sorted(edges), np.ones((n, 1)), labels, name=f"barbell-{m}-{p}")


def psd_operator(g):
    """Dense ``I - L`` for a graph (or an already normalized operator)."""
    L = normalized_operator(g) if isinstance(g, GraphDataset) else g
    dense = L.to_dense() if hasattr(L, "to_dense") else np.asarray(L, dtype=np.float64)
    return np.eye(dense.shape[0]) - dense


def _check_grid(time_grid):
    t = np.asarray(time_grid, dtype=np.float64)
    if t.ndim != 1 or t.size == 0 or t[0] != 0.0 or np.any(np.diff(t) <= 0):
        raise ValueError("time grid must be strictly ascending and start at 0")
    return t


def heat_propagate(L_psd, f0, time_grid):
    """f(t) = sum_a exp(-E_a t) <phi_a, f0> phi_a."""
    L_psd = np.asarray(L_psd, dtype=np.float64)
    t = _check_grid(time_grid)
    f0 = np.asarray(f0, dtype=np.float64)
    E, phi = sla.eigh(L_psd)
    c = phi.T @ f0
    decay = np.exp(-np.outer(t, np.clip(E, 0.0, None)))
    snaps = (decay * c) @ phi.T
    snaps[0] = f0
    return PropagationRun("heat", L_psd, f0, t, snaps)


def schrodinger_propagate(L_psd, psi0, time_grid):
    """psi(t) = sum_a exp(-i E_a t) c_a phi_a with c_a = <phi_a, psi0>.

    ``psi0`` may be real or complex; snapshots hold |psi_i(t)|^2.
    """
    L_psd = np.asarray(L_psd, dtype=np.float64)
    t = _check_grid(time_grid)
    psi0 = np.asarray(psi0)
    if abs(np.linalg.norm(psi0) - 1.0) > 1e-12:
        raise ValueError("initial state must have unit norm")
    re0 = np.real(psi0).astype(np.float64)
    im0 = np.imag(psi0).astype(np.float64) if np.iscomplexobj(psi0) else np.zeros_like(re0)
    E, phi = sla.eigh(L_psd)
    a, b = phi.T @ re0, phi.T @ im0
    phase = np.outer(t, E)
    cos, sin = np.cos(phase), np.sin(phase)
    # (a + ib)(cos - i sin) = (a cos + b sin) + i (b cos - a sin)
    real = (cos * a + sin * b) @ phi.T
    imag = (cos * b - sin * a) @ phi.T
    real[0], imag[0] = re0, im0
    prob = real * real + imag * imag
    return PropagationRun("quantum", L_psd, psi0, t, prob, real, imag)


def default_initial_state(n, vertex=0):
    f0 = np.zeros(n)
    f0[vertex] = 1.0
    return f0
