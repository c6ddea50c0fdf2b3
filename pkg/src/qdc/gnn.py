"""Full-batch GCN with hand-written backward passes.

A propagation layer computes ``act(S @ dropout(H) @ W)``. A plain model is
one tower whose last layer is linear and emits class logits. The multiscale
model runs two towers in parallel (one per propagation matrix, typically the
normalized operator and a rewired kernel), combines their ReLU outputs by
``add`` or ``concat`` and applies a linear readout.

Propagation matrices must be symmetric: the backward pass uses ``S`` in
place of ``S^T``.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from qdc._rng import substream

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
COMBINATORS = ("concat", "add")


@dataclass(frozen=True)
class TowerConfig:
    num_layers: int = 2
    hidden_dim: int = 64
    dropout: float = 0.5

    def __post_init__(self):
        if self.num_layers < 1 or self.hidden_dim < 1:
            raise ValueError("num_layers and hidden_dim must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


@dataclass(frozen=True)
class ModelConfig:
    towers: tuple = (TowerConfig(),)
    combinator: str | None = None

    def __post_init__(self):
        towers = tuple(t if isinstance(t, TowerConfig) else TowerConfig(**t) for t in self.towers)
        object.__setattr__(self, "towers", towers)
        if len(towers) == 1:
            if self.combinator is not None:
                raise ValueError("combinator only applies to multiscale models")
        elif len(towers) == 2:
            if self.combinator not in COMBINATORS:
                raise ValueError(f"multiscale combinator must be one of {COMBINATORS}")
            if self.combinator == "add" and towers[0].hidden_dim != towers[1].hidden_dim:
                raise ValueError("add combinator needs equal tower output dims")
        else:
            raise ValueError("a model has one tower or two (multiscale)")

    @classmethod
    def gcn(cls, num_layers=2, hidden_dim=64, dropout=0.5):
        return cls((TowerConfig(num_layers, hidden_dim, dropout),))

    @classmethod
    def multiscale(cls, lap, kernel, combinator="concat"):
        return cls((lap, kernel), combinator)

    @property
    def is_multiscale(self):
        return len(self.towers) == 2

    def to_dict(self):
        return {"towers": [asdict(t) for t in self.towers], "combinator": self.combinator}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    weight_decay: float = 5e-4
    max_epochs: int = 1000
    early_stop_patience: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0 < self.early_stop_patience < self.max_epochs:
            raise ValueError("need 0 < early_stop_patience < max_epochs")


@dataclass
class TrainRun:
    train_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_acc: float = float("nan")
    test_acc: float = float("nan")
    wall_time: float = 0.0
    failed: bool = False
    params: dict | None = None

    def summary(self):
        return {
            "best_epoch": self.best_epoch,
            "best_val_acc": self.best_val_acc,
            "test_acc": self.test_acc,
            "epochs_run": len(self.train_loss),
            "failed": self.failed,
        }

    def write(self, prefix):
        """``<prefix>.epochs.jsonl`` (one epoch per line) and ``<prefix>.summary.json``."""
        prefix = Path(prefix)
        with open(f"{prefix}.epochs.jsonl", "w", encoding="utf-8") as fh:
            for i, (loss, acc) in enumerate(zip(self.train_loss, self.val_acc)):
                fh.write(json.dumps({"epoch": i, "train_loss": loss, "val_acc": acc}) + "\n")
        with open(f"{prefix}.summary.json", "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)


def _glorot(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _layer_dims(model, in_dim, n_classes):
    """``{param name: (fan_in, fan_out)}`` in a fixed order."""
    dims = {}
    if not model.is_multiscale:
        t = model.towers[0]
        widths = [in_dim] + [t.hidden_dim] * (t.num_layers - 1) + [n_classes]
        for i in range(t.num_layers):
            dims[f"W{i}"] = (widths[i], widths[i + 1])
        return dims
    for name, t in zip(("lap", "kernel"), model.towers):
        widths = [in_dim] + [t.hidden_dim] * t.num_layers
        for i in range(t.num_layers):
            dims[f"{name}.W{i}"] = (widths[i], widths[i + 1])
    a, b = (t.hidden_dim for t in model.towers)
    dims["readout"] = (a + b if model.combinator == "concat" else a, n_classes)
    return dims


def init_params(model, in_dim, n_classes, seed=0):
    rng = substream(seed, "init")
    return {name: _glorot(rng, *shape) for name, shape in _layer_dims(model, in_dim, n_classes).items()}


def _dropout(H, p, rng):
    if rng is None or p == 0.0:
        return H, None
    if sp.issparse(H):
        keep = (rng.random(H.nnz) >= p) / (1.0 - p)
        out = H.copy()
        out.data = out.data * keep
        return out, None
    mask = (rng.random(H.shape) >= p) / (1.0 - p)
    return H * mask, mask


def _tower_forward(params, prefix, tower, S, X, rng, last_linear):
    H = X
    cache = []
    for i in range(tower.num_layers):
        W = params[f"{prefix}W{i}"]
        Hd, mask = _dropout(H, tower.dropout, rng)
        T = Hd @ W
        T = np.asarray(T)
        Z = S.matmat(T)
        relu = not (last_linear and i == tower.num_layers - 1)
        A = np.maximum(Z, 0.0) if relu else Z
        cache.append((Hd, mask, Z, relu))
        H = A
    return H, cache


def _tower_backward(params, prefix, S, cache, dH, grads):
    for i in reversed(range(len(cache))):
        Hd, mask, Z, relu = cache[i]
        W = params[f"{prefix}W{i}"]
        dZ = dH * (Z > 0) if relu else dH
        dT = S.matmat(dZ)
        grads[f"{prefix}W{i}"] = np.asarray(Hd.T @ dT)
        if i > 0:
            dH = dT @ W.T
            if mask is not None:
                dH = dH * mask


def forward(params, model, mats, X, rng=None):
    """Logits and a cache for :func:`backward`. ``rng=None`` disables dropout."""
    if len(mats) != len(model.towers):
        raise ValueError(f"model has {len(model.towers)} towers but got {len(mats)} matrices")
    n = X.shape[0]
    for S in mats:
        if S.dim != n:
            raise ValueError(f"propagation matrix is {S.dim}x{S.dim} but X has {n} rows")
    if not model.is_multiscale:
        logits, cache = _tower_forward(params, "", model.towers[0], mats[0], X, rng, True)
        return logits, {"towers": [cache]}
    outs, caches = [], []
    for name, tower, S in zip(("lap", "kernel"), model.towers, mats):
        H, c = _tower_forward(params, f"{name}.", tower, S, X, rng, False)
        outs.append(H)
        caches.append(c)
    Hc = np.hstack(outs) if model.combinator == "concat" else outs[0] + outs[1]
    logits = Hc @ params["readout"]
    return logits, {"towers": caches, "combined": Hc, "widths": [o.shape[1] for o in outs]}


def backward(params, model, mats, cache, dlogits):
    grads = {}
    if not model.is_multiscale:
        _tower_backward(params, "", mats[0], cache["towers"][0], dlogits, grads)
        return grads
    grads["readout"] = cache["combined"].T @ dlogits
    dHc = dlogits @ params["readout"].T
    if model.combinator == "concat":
        a = cache["widths"][0]
        parts = (dHc[:, :a], dHc[:, a:])
    else:
        parts = (dHc, dHc)
    for name, S, c, dH in zip(("lap", "kernel"), mats, cache["towers"], parts):
        _tower_backward(params, f"{name}.", S, c, dH, grads)
    return grads


def softmax_cross_entropy(logits, labels, idx):
    """Mean cross-entropy over ``idx`` and its gradient w.r.t. all logits."""
    z = logits[idx]
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    y = labels[idx]
    loss = float(np.mean(logsum - z[np.arange(len(idx)), y]))
    p = np.exp(z - logsum[:, None])
    p[np.arange(len(idx)), y] -= 1.0
    d = np.zeros_like(logits)
    d[idx] = p / len(idx)
    return loss, d


def loss_and_grad(params, model, mats, X, labels, idx, rng=None):
    logits, cache = forward(params, model, mats, X, rng)
    loss, d = softmax_cross_entropy(logits, labels, idx)
    return loss, backward(params, model, mats, cache, d)


def accuracy(logits, labels, idx):
    if len(idx) == 0:
        return float("nan")
    return float(np.mean(np.argmax(logits[idx], axis=1) == labels[idx]))


class Adam:
    """Adam with decoupled weight decay: ``W -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * W)``."""

    def __init__(self, params, lr, weight_decay=0.0, betas=ADAM_BETAS, eps=ADAM_EPS):
        self.lr, self.wd, self.betas, self.eps = lr, weight_decay, betas, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for k, W in params.items():
            g = grads.get(k)
            if g is None:
                g = np.zeros_like(W)
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            params[k] = W - self.lr * (update + self.wd * W)


def feature_matrix(X, density_cutoff=0.1):
    """Sparse CSR view of mostly-zero features, dense otherwise."""
    X = np.asarray(X, dtype=np.float64)
    if X.size and np.count_nonzero(X) / X.size < density_cutoff:
        return sp.csr_matrix(X)
    return X


def train(model, tc, data, split, mats, features=None):
    """Full-batch training with early stopping on validation accuracy.

    Parameters of the best-validation epoch are restored before the single
    test evaluation. A non-finite loss ends the run with ``failed=True``.
    """
    t0 = time.perf_counter()
    X = feature_matrix(data.features) if features is None else features
    labels = np.asarray(data.labels)
    params = init_params(model, X.shape[1], data.num_classes, tc.seed)
    opt = Adam(params, tc.learning_rate, tc.weight_decay)
    drop_rng = substream(tc.seed, "dropout")
    run = TrainRun()
    best = None
    stale = 0
    train_idx, val_idx = split.train_idx, split.val_idx
    for epoch in range(tc.max_epochs):
        loss, grads = loss_and_grad(params, model, mats, X, labels, train_idx, drop_rng)
        if not np.isfinite(loss):
            run.failed = True
            break
        opt.step(params, grads)
        logits, _ = forward(params, model, mats, X)
        if not np.all(np.isfinite(logits)):
            run.failed = True
            break
        acc = accuracy(logits, labels, val_idx)
        run.train_loss.append(loss)
        run.val_acc.append(acc)
        if best is None or acc > run.best_val_acc:
            run.best_val_acc, run.best_epoch = acc, epoch
            best = {k: v.copy() for k, v in params.items()}
            stale = 0
        else:
            stale += 1
            if stale >= tc.early_stop_patience:
                break
    if best is not None and not run.failed:
        logits, _ = forward(best, model, mats, X)
        run.test_acc = accuracy(logits, labels, split.test_idx)
        run.params = best
    run.wall_time = time.perf_counter() - t0
    return run


def gradient_check(model, data, mats, epsilon=1e-5, n_samples=200, seed=0, idx=None,
                   params=None):
    """Max relative error between analytic and central-difference gradients.

    Dropout is disabled. Relative error is ``|a - n| / max(|a|, |n|, 1e-6)``;
    identical zeros give 0. Samples ``n_samples`` parameter entries (all of
    them if there are fewer).
    """
    X = np.asarray(data.features, dtype=np.float64)
    labels = np.asarray(data.labels)
    if idx is None:
        idx = np.arange(data.num_vertices)
    if params is None:
        params = init_params(model, X.shape[1], data.num_classes, seed)
    params = {k: v.copy() for k, v in params.items()}
    _, grads = loss_and_grad(params, model, mats, X, labels, idx)
    slots = [(k, i) for k, v in params.items() for i in range(v.size)]
    rng = substream(seed, "gradcheck")
    if len(slots) > n_samples:
        pick = rng.choice(len(slots), size=n_samples, replace=False)
        slots = [slots[i] for i in sorted(pick)]
    worst = 0.0
    for k, i in slots:
        flat = params[k].reshape(-1)
        orig = flat[i]
        flat[i] = orig + epsilon
        lp, _ = loss_and_grad(params, model, mats, X, labels, idx)
        flat[i] = orig - epsilon
        lm, _ = loss_and_grad(params, model, mats, X, labels, idx)
        flat[i] = orig
        num = (lp - lm) / (2.0 * epsilon)
        ana = grads[k].reshape(-1)[i]
        if num == ana:
            continue
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-6))
    return worst


def save_params(params, prefix):
    """``<prefix>.bin`` (flat little-endian float64) and ``<prefix>.json`` (names, shapes, offsets)."""
    manifest, offset = [], 0
    with open(f"{prefix}.bin", "wb") as fh:
        for name, W in params.items():
            fh.write(np.asarray(W, dtype="<f8").tobytes())
            manifest.append({"name": name, "shape": list(W.shape), "offset": offset})
            offset += W.size
    with open(f"{prefix}.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)


def load_params(prefix):
    blob = np.fromfile(f"{prefix}.bin", dtype="<f8")
    with open(f"{prefix}.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    out = {}
    for entry in manifest:
        size = int(np.prod(entry["shape"]))
        out[entry["name"]] = blob[entry["offset"]:entry["offset"] + size].reshape(entry["shape"]).copy()
    return out
