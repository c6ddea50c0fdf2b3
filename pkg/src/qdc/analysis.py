"""Spectral homophily curves, random hyperparameter search and reporting."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from qdc._rng import substream
from qdc.graph import homophily, normalized_operator
from qdc.spectral import CLUSTER_GAP, dense_eigensolve

SPECTRAL_THRESHOLD = 1e-7
DEFAULT_TRIALS = 250


# -- spectral homophily -------------------------------------------------------

@dataclass
class SpectralHomophilyCurve:
    eigenvalues: np.ndarray
    homophily: np.ndarray
    multiplicity: np.ndarray
    global_homophily: float
    sparsify_threshold: float = SPECTRAL_THRESHOLD

    @property
    def points(self):
        return list(zip(self.eigenvalues.tolist(), self.homophily.tolist(),
                        self.multiplicity.tolist()))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["eigenvalue", "homophily", "multiplicity"])
        for e, h, m in self.points:
            w.writerow([repr(e), repr(h), m])
        return buf.getvalue()

    def to_json(self):
        return {
            "global_homophily": self.global_homophily,
            "sparsify_threshold": self.sparsify_threshold,
            "points": [{"eigenvalue": e, "homophily": h, "multiplicity": m}
                       for e, h, m in self.points],
        }


def cluster_eigenvalues(values, gap=CLUSTER_GAP):
    """Group ascending eigenvalues into runs whose neighbours differ by < gap."""
    values = np.asarray(values)
    if values.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(values) >= gap) + 1
    return np.split(np.arange(values.size), breaks)


def _count_at_least(sorted_vals, a, threshold):
    """For each ``a_i`` count entries x of ``sorted_vals`` with ``a_i * x >= threshold``.

    The product is monotone in x, so a searchsorted guess on ``threshold / a_i``
    is nudged until it agrees with the product test exactly.
    """
    n = sorted_vals.size
    out = np.zeros(a.size, dtype=np.int64)
    nz = a > 0
    if n == 0 or not nz.any():
        return out
    ai = a[nz]
    p = np.searchsorted(sorted_vals, threshold / ai, side="left")
    while True:
        up = (p < n) & (ai * sorted_vals[np.minimum(p, n - 1)] < threshold)
        down = (p > 0) & (ai * sorted_vals[np.maximum(p - 1, 0)] >= threshold)
        if not (up.any() or down.any()):
            break
        p = p + up - down
    out[nz] = n - p
    return out


def rank_one_homophily(phi, labels, threshold=SPECTRAL_THRESHOLD):
    """Node homophily of the graph whose edges are the support of ``|phi phi^T| >= threshold``.

    The diagonal is removed and only vertices touched by a surviving edge take
    part in the average (an empty edge set gives 0). Computed from sorted
    magnitudes without forming the N x N outer product.
    """
    a = np.abs(np.asarray(phi, dtype=np.float64))
    labels = np.asarray(labels)
    n = a.size
    if n == 0:
        return 0.0
    self_link = (a * a >= threshold).astype(np.int64)
    total = _count_at_least(np.sort(a), a, threshold) - self_link
    same = np.empty(n, dtype=np.int64)
    for c in np.unique(labels):
        members = labels == c
        same[members] = _count_at_least(np.sort(a[members]), a[members], threshold)
    same -= self_link
    ok = total > 0
    if not ok.any():
        return 0.0
    return float(np.mean(same[ok] / total[ok]))


def spectral_homophily(g, threshold=SPECTRAL_THRESHOLD, eigensystem=None):
    """Homophily as a function of the eigenvalues of the normalized operator.

    For every eigenvector the rank-one adjacency ``phi phi^T`` is thresholded
    at ``|.| >= threshold`` with the diagonal removed and node homophily is
    computed on the surviving edge set; eigenvalues that coincide within 1e-9 form one
    point holding the mean over their eigenvectors.
    """
    es = eigensystem or dense_eigensolve(normalized_operator(g))
    order = np.argsort(es.eigenvalues, kind="stable")
    vals = es.eigenvalues[order]
    vecs = es.eigenvectors[:, order]
    per_vector = np.array([rank_one_homophily(vecs[:, a], g.labels, threshold)
                           for a in range(vals.size)])
    groups = cluster_eigenvalues(vals)
    return SpectralHomophilyCurve(
        eigenvalues=np.array([vals[idx].mean() for idx in groups]),
        homophily=np.array([per_vector[idx].mean() for idx in groups]),
        multiplicity=np.array([idx.size for idx in groups], dtype=np.int64),
        global_homophily=homophily(g),
        sparsify_threshold=threshold,
    )


# -- search spaces ------------------------------------------------------------

@dataclass(frozen=True)
class Categorical:
    values: tuple

    def sample(self, rng):
        return self.values[int(rng.integers(len(self.values)))]

    def describe(self):
        return {"dist": "categorical", "values": list(self.values)}


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float

    def sample(self, rng):
        return float(rng.uniform(self.low, self.high))

    def describe(self):
        return {"dist": "uniform", "low": self.low, "high": self.high}


@dataclass(frozen=True)
class LogUniform:
    low: float
    high: float

    def sample(self, rng):
        return float(math.exp(rng.uniform(math.log(self.low), math.log(self.high))))

    def describe(self):
        return {"dist": "loguniform", "low": self.low, "high": self.high}


LAYERS = Categorical((1, 2))
HIDDEN = Categorical((2, 4, 8, 16, 32, 64, 128))
DROPOUT = Uniform(0.0, 0.99)
LR = LogUniform(1e-4, 1e-1)
WD = Uniform(0.0, 0.9)

SEARCH_SPACES = {
    "gcn": {
        "num_layers": LAYERS, "hidden_dim": HIDDEN, "dropout": DROPOUT,
        "learning_rate": LR, "weight_decay": WD,
    },
    "gcn+gdc": {
        "num_layers": LAYERS, "hidden_dim": HIDDEN, "dropout": DROPOUT,
        "alpha": Uniform(0.001, 0.5), "eps": Uniform(1e-7, 1e-1),
        "learning_rate": LR, "weight_decay": WD,
    },
    "gcn+qdc": {
        "num_layers": LAYERS, "hidden_dim": HIDDEN, "dropout": DROPOUT,
        "mu": Uniform(-1.0, 1.0), "sigma": Uniform(0.1, 1.0), "eps": LogUniform(1e-7, 1e-1),
        "learning_rate": LR, "weight_decay": WD,
    },
    "gcn+bpdc": {
        "num_layers": LAYERS, "hidden_dim": HIDDEN, "dropout": DROPOUT,
        "mu": Uniform(-1.0, 1.0), "gamma": Uniform(0.1, 1.0), "eps": LogUniform(1e-7, 1e-1),
        "learning_rate": LR, "weight_decay": WD,
    },
    "gcn+multiscale": {
        "lap_num_layers": LAYERS, "lap_hidden_dim": HIDDEN, "lap_dropout": DROPOUT,
        "kernel_num_layers": LAYERS, "kernel_hidden_dim": HIDDEN, "kernel_dropout": DROPOUT,
        "mu": Uniform(-1.0, 1.0), "sigma": Uniform(0.1, 1.0), "eps": LogUniform(1e-7, 1e-1),
        "combinator": Categorical(("concat", "add")),
        "learning_rate": LR, "weight_decay": WD,
    },
}


def sample_config(space, rng):
    """One draw; parameters are sampled in the space's declared order."""
    return {name: dist.sample(rng) for name, dist in space.items()}


@dataclass
class Trial:
    index: int
    config: dict
    val_mean: float = float("nan")
    val_std: float = float("nan")
    test_mean: float = float("nan")
    test_std: float = float("nan")
    failed: bool = False
    error: str = ""


@dataclass
class Leaderboard:
    family: str
    seed: int
    trials: list = field(default_factory=list)
    n_failed: int = 0

    @property
    def ranked(self):
        ok = [t for t in self.trials if not t.failed]
        return sorted(ok, key=lambda t: (-t.val_mean, t.index))

    @property
    def best(self):
        r = self.ranked
        return r[0] if r else None

    def to_csv(self):
        """One row per successful trial, best first; test columns only on the best."""
        ranked = self.ranked
        keys = sorted({k for t in ranked for k in t.config})
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "trial", "val_mean", "val_std", "test_mean", "test_std"] + keys)
        for r, t in enumerate(ranked):
            test = [repr(t.test_mean), repr(t.test_std)] if r == 0 else ["", ""]
            w.writerow([r, t.index, repr(t.val_mean), repr(t.val_std)] + test
                       + [repr(t.config.get(k, "")) for k in keys])
        return buf.getvalue()

    def to_json(self):
        best = self.best
        return {
            "family": self.family,
            "seed": self.seed,
            "n_trials": len(self.trials),
            "n_failed": self.n_failed,
            "best": None if best is None else {
                "trial": best.index, "config": best.config,
                "val_mean": best.val_mean, "val_std": best.val_std,
                "test_mean": best.test_mean, "test_std": best.test_std,
            },
            "trials": [
                {"trial": t.index, "config": t.config, "val_mean": _num(t.val_mean),
                 "val_std": _num(t.val_std), "failed": t.failed, "error": t.error}
                for t in self.trials
            ],
        }


def _num(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


def aggregate_splits(runs):
    """Mean and population standard deviation of test accuracies."""
    accs = np.array([r.test_acc if hasattr(r, "test_acc") else float(r) for r in runs])
    if accs.size < 2:
        raise ValueError("need at least two runs to aggregate")
    return {"mean": float(accs.mean()), "std": float(accs.std())}


def run_search(space, evaluate, family="custom", seed=0, n_trials=DEFAULT_TRIALS):
    """Seeded independent random search.

    ``evaluate(config, trial_index)`` returns a list of TrainRun (one per
    split). Trials whose runs failed are kept with ``failed=True`` and left
    out of the ranking.
    """
    board = Leaderboard(family, seed)
    for i in range(n_trials):
        config = sample_config(space, substream(seed, "sampler", i))
        trial = Trial(i, config)
        try:
            runs = evaluate(config, i)
        except (FloatingPointError, ArithmeticError, np.linalg.LinAlgError, RuntimeError) as exc:
            trial.failed, trial.error = True, f"{type(exc).__name__}: {exc}"
            runs = []
        if not trial.failed:
            if not runs or any(r.failed for r in runs):
                trial.failed, trial.error = True, "non-finite loss"
            else:
                val = np.array([r.best_val_acc for r in runs])
                test = np.array([r.test_acc for r in runs])
                trial.val_mean, trial.val_std = float(val.mean()), float(val.std())
                trial.test_mean, trial.test_std = float(test.mean()), float(test.std())
        board.n_failed += trial.failed
        board.trials.append(trial)
    return board


def dumps_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False)
