"""Command-line front end: ``qdc <command> [options]``.

Every command that writes artifacts puts them in ``--out`` together with one
``manifest.json`` holding the resolved configuration, input hashes, seed,
version and output digests. Option values resolve as flags > ``--config``
file > built-in defaults.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from qdc import __version__
from qdc.analysis import SEARCH_SPACES, aggregate_splits, dumps_json, run_search, spectral_homophily
from qdc.dynamics import (barbell_graph, default_initial_state, heat_propagate, psd_operator,
                          schrodinger_propagate)
from qdc.gnn import ModelConfig, TowerConfig, TrainConfig, save_params, train
from qdc.graph import (BundleError, GraphDataset, canonical_edges, generate_random_splits,
                       homophily, load_graph_bundle, normalized_operator, read_edges, save_graph_bundle)
from qdc.kernels import KernelSpec, build_kernel, gdc_baseline, quantum_kernel, save_kernel
from qdc.spectral import DENSE_LIMIT, EigenSolverError, band_from_dense, dense_eigensolve

log = logging.getLogger("qdc")

BUILTIN_GRAPHS = {
    "k3": lambda: GraphDataset(3, [(0, 1), (0, 2), (1, 2)], np.eye(3), np.array([0, 0, 0]), name="k3"),
    "two-vertex": lambda: GraphDataset(2, [(0, 1)], np.eye(2), np.array([0, 1]), name="two-vertex"),
}

KERNEL_PARAMS = ("mu", "sigma", "gamma", "alpha", "t", "eps", "topk", "eigen_budget")

DEFAULTS = {
    "common": {"seed": 0},
    "ingest": {"random_splits": False},
    "kernel": {"family": "gaussian", "tol": 1e-6, "block_rows": 1024},
    "train": {
        "family": None, "multiscale": False, "combinator": None,
        "layers": 2, "hidden": 64, "dropout": 0.5,
        "kernel_layers": 2, "kernel_hidden": 64, "kernel_dropout": 0.5,
        "lr": 0.01, "wd": 5e-4, "max_epochs": 1000, "patience": 50,
        "splits": "all", "tol": 1e-6,
    },
    "sweep": {"model": "gcn", "trials": 250, "max_epochs": 1000, "patience": 50, "tol": 1e-6},
    "simulate": {"barbell": [5, 1], "steps": 1000, "dt": 1.0, "vertex": 0},
    "homophily": {},
    "spectrum": {"threshold": 1e-7},
}


class UsageError(Exception):
    pass


# -- helpers ------------------------------------------------------------------

def resolve_bundle(name):
    """A bundle directory, a name under ``QDC_DATA_DIR``, or a built-in toy graph."""
    path = Path(name)
    if path.is_dir():
        return load_graph_bundle(path), str(path)
    data_dir = os.environ.get("QDC_DATA_DIR")
    if data_dir and (Path(data_dir) / name).is_dir():
        return load_graph_bundle(Path(data_dir) / name), str(Path(data_dir) / name)
    if name in BUILTIN_GRAPHS:
        return BUILTIN_GRAPHS[name](), f"builtin:{name}"
    where = f" or under QDC_DATA_DIR={data_dir}" if data_dir else " (QDC_DATA_DIR is unset)"
    raise BundleError(f"bundle {name!r} not found as a directory{where}")


def with_splits(g, seed):
    """Attach splits, generating seeded random ones when the bundle has none."""
    if g.splits:
        return g, "bundle"
    return g.with_splits(generate_random_splits(g, seed=seed)), "random"


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, obj):
    Path(path).write_text(dumps_json(obj) + "\n", encoding="utf-8")


def write_manifest(out, command, config, inputs, outputs, t0):
    manifest = {
        "command": command,
        "config": config,
        "inputs": inputs,
        "seed": config["seed"],
        "version": __version__,
        "outputs": {name: _sha256(out / name) for name in sorted(outputs)},
        "wall_time": time.perf_counter() - t0,
    }
    _write_json(out / "manifest.json", manifest)


def load_config_file(path):
    text = Path(path).read_text(encoding="utf-8")
    if str(path).endswith((".yaml", ".yml")):
        import yaml
        data = yaml.safe_load(text) or {}
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a mapping")
    return data


def resolve_config(command, args):
    """Defaults < config file (top level or per-command section) < explicit flags."""
    cfg = dict(DEFAULTS["common"])
    cfg.update(DEFAULTS[command])
    explicit = {k: v for k, v in vars(args).items() if k not in ("command", "config", "func")}
    if getattr(args, "config", None):
        data = load_config_file(args.config)
        section = data.get(command, {})
        top = {k: v for k, v in data.items() if k not in DEFAULTS}
        for src in (top, section):
            for k, v in src.items():
                k = k.replace("-", "_")
                if k not in cfg and k not in _known_keys(command):
                    raise UsageError(f"unknown config key {k!r} for {command}")
                cfg[k] = v
    cfg.update(explicit)
    return cfg


def _known_keys(command):
    keys = set(DEFAULTS[command]) | set(DEFAULTS["common"]) | {"bundle", "out"}
    if command in ("kernel", "train"):
        keys |= set(KERNEL_PARAMS)
    return keys


def kernel_spec_from(cfg, family):
    params = {k: cfg.get(k) for k in KERNEL_PARAMS if cfg.get(k) is not None}
    return KernelSpec(family=family, **params)


def _out_dir(cfg):
    if not cfg.get("out"):
        raise UsageError("--out is required")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands -----------------------------------------------------------------

def cmd_ingest(cfg, t0):
    g, src = resolve_bundle(cfg["bundle"])
    out = _out_dir(cfg)
    dups = loops = 0
    if not src.startswith("builtin:"):
        _, dups, loops = canonical_edges(read_edges(Path(src) / "edges.tsv"))
    splits_source = "bundle" if g.splits else "none"
    if cfg["random_splits"] or not g.splits:
        g = g.with_splits(generate_random_splits(g, seed=cfg["seed"]))
        splits_source = "random"
    save_graph_bundle(g, out / "bundle")
    stats = {
        "name": g.name,
        "num_vertices": g.num_vertices,
        "num_edges": g.num_edges,
        "num_features": int(g.features.shape[1]),
        "num_classes": g.num_classes,
        "homophily": homophily(g),
        "dropped_duplicates": int(dups),
        "dropped_self_loops": int(loops),
        "splits_source": splits_source,
    }
    _write_json(out / "stats.json", stats)
    print(f"{g.name}: N={g.num_vertices} |E|={g.num_edges} d={stats['num_features']} "
          f"classes={g.num_classes} splits={splits_source}")
    outputs = ["stats.json"] + [f"bundle/{p.name}" for p in sorted((out / "bundle").iterdir())]
    write_manifest(out, "ingest", cfg, {"bundle": g.content_hash()}, outputs, t0)


def cmd_kernel(cfg, t0):
    g, _ = resolve_bundle(cfg["bundle"])
    out = _out_dir(cfg)
    spec = kernel_spec_from(cfg, cfg["family"])
    L = normalized_operator(g)
    try:
        kernel = build_kernel(L, spec, seed=cfg["seed"], tol=cfg["tol"],
                              block_rows=cfg["block_rows"], graph_hash=g.content_hash())
    except EigenSolverError as exc:
        res = exc.residuals
        detail = "" if res is None else f"; max residual {np.max(res):.3e} over {len(res)} pairs"
        print(f"eigensolver failed: {exc}{detail}", file=sys.stderr)
        return 2
    save_kernel(kernel, out / "kernel.bin")
    _write_json(out / "kernel.json", {"spec": spec.to_dict(), "provenance": kernel.provenance,
                                      "num_vertices": g.num_vertices})
    prov = kernel.provenance
    print(f"nnz before sparsification: {prov['nnz_before']}")
    print(f"nnz after sparsification: {prov['nnz_after']}")
    write_manifest(out, "kernel", cfg, {"bundle": g.content_hash()}, ["kernel.bin", "kernel.json"], t0)
    return 0


def _model_from(cfg):
    lap = TowerConfig(cfg["layers"], cfg["hidden"], cfg["dropout"])
    if not cfg["multiscale"]:
        return ModelConfig((lap,))
    kern = TowerConfig(cfg["kernel_layers"], cfg["kernel_hidden"], cfg["kernel_dropout"])
    return ModelConfig.multiscale(lap, kern, cfg["combinator"] or "concat")


def _check_train_flags(cfg):
    if cfg["combinator"] is not None and not cfg["multiscale"]:
        raise UsageError("--combinator requires --multiscale")
    if cfg["multiscale"] and cfg["family"] is None:
        raise UsageError("--multiscale requires --family")
    given = [k for k in KERNEL_PARAMS if cfg.get(k) is not None]
    if given and cfg["family"] is None:
        raise UsageError(f"kernel options {given} require --family")


def _select_splits(g, which):
    if which == "all":
        return list(range(len(g.splits)))
    idx = [int(s) for s in str(which).split(",")]
    if any(i < 0 or i >= len(g.splits) for i in idx):
        raise UsageError(f"split indices must lie in [0, {len(g.splits)})")
    return idx


def cmd_train(cfg, t0):
    _check_train_flags(cfg)
    g, _ = resolve_bundle(cfg["bundle"])
    out = _out_dir(cfg)
    g, splits_source = with_splits(g, cfg["seed"])
    L = normalized_operator(g)
    model = _model_from(cfg)
    mats = [L]
    kernel_info = None
    if cfg["family"] is not None:
        spec = kernel_spec_from(cfg, cfg["family"])
        try:
            kernel = build_kernel(L, spec, seed=cfg["seed"], tol=cfg["tol"], graph_hash=g.content_hash())
        except EigenSolverError as exc:
            print(f"eigensolver failed: {exc}", file=sys.stderr)
            return 2
        kernel_info = {"spec": spec.to_dict(), "provenance": kernel.provenance}
        mats = [L, kernel.matrix] if model.is_multiscale else [kernel.matrix]
    tc = TrainConfig(cfg["lr"], cfg["wd"], cfg["max_epochs"], cfg["patience"], cfg["seed"])
    runs, outputs, per_split = [], [], []
    for s in _select_splits(g, cfg["splits"]):
        run = train(model, tc, g, g.splits[s], mats)
        runs.append(run)
        run.write(out / f"split{s}")
        outputs += [f"split{s}.epochs.jsonl", f"split{s}.summary.json"]
        if run.params is not None:
            save_params(run.params, out / f"split{s}.params")
            outputs += [f"split{s}.params.bin", f"split{s}.params.json"]
        per_split.append({"split": s, **run.summary()})
    ok = [r for r in runs if not r.failed]
    agg = aggregate_splits(ok) if len(ok) >= 2 else None
    _write_json(out / "results.json", {
        "model": model.to_dict(), "kernel": kernel_info, "splits_source": splits_source,
        "splits": per_split, "test_accuracy": agg,
    })
    outputs.append("results.json")
    if agg:
        print(f"test accuracy {agg['mean']:.4f} +/- {agg['std']:.4f} over {len(ok)} splits")
    elif ok:
        print(f"test accuracy {ok[0].test_acc:.4f}")
    write_manifest(out, "train", cfg, {"bundle": g.content_hash()}, outputs, t0)
    return 0 if len(ok) == len(runs) else 1


class SweepEvaluator:
    """Turns a sampled configuration into per-split training runs."""

    def __init__(self, family, g, cfg):
        self.family, self.g, self.cfg = family, g, cfg
        self.L = normalized_operator(g)
        self._dense = None

    def _eigensystem(self, mu, k):
        n = self.L.dim
        if n > DENSE_LIMIT:
            return None  # folded solver per trial
        if self._dense is None:
            self._dense = dense_eigensolve(self.L)
        return band_from_dense(self._dense, mu, k)

    def _kernel(self, c):
        if self.family == "gcn+gdc":
            return gdc_baseline(self.L, KernelSpec("ppr", alpha=c["alpha"], eps=c["eps"])).matrix
        if self.family == "gcn+bpdc":
            spec = KernelSpec("bandpass", mu=c["mu"], gamma=c["gamma"], eps=c["eps"])
        else:
            spec = KernelSpec("gaussian", mu=c["mu"], sigma=c["sigma"], eps=c["eps"])
        es = self._eigensystem(spec.mu, spec.budget(self.L.dim))
        return quantum_kernel(self.L, spec, seed=self.cfg["seed"], tol=self.cfg["tol"],
                              eigensystem=es).matrix

    def model(self, c):
        if self.family == "gcn+multiscale":
            lap = TowerConfig(c["lap_num_layers"], c["lap_hidden_dim"], c["lap_dropout"])
            kern = TowerConfig(c["kernel_num_layers"], c["kernel_hidden_dim"], c["kernel_dropout"])
            if c["combinator"] == "add" and lap.hidden_dim != kern.hidden_dim:
                # add needs equal widths; the kernel tower follows the Laplacian one
                kern = TowerConfig(kern.num_layers, lap.hidden_dim, kern.dropout)
            return ModelConfig.multiscale(lap, kern, c["combinator"])
        return ModelConfig.gcn(c["num_layers"], c["hidden_dim"], c["dropout"])

    def __call__(self, c, trial):
        model = self.model(c)
        if self.family == "gcn":
            mats = [self.L]
        else:
            Q = self._kernel(c)
            mats = [self.L, Q] if model.is_multiscale else [Q]
        tc = TrainConfig(c["learning_rate"], c["weight_decay"], self.cfg["max_epochs"],
                         self.cfg["patience"], self.cfg["seed"])
        return [train(model, tc, self.g, split, mats) for split in self.g.splits]


def cmd_sweep(cfg, t0):
    if cfg["model"] not in SEARCH_SPACES:
        raise UsageError(f"--model must be one of {sorted(SEARCH_SPACES)}")
    g, _ = resolve_bundle(cfg["bundle"])
    out = _out_dir(cfg)
    g, splits_source = with_splits(g, cfg["seed"])
    board = run_search(SEARCH_SPACES[cfg["model"]], SweepEvaluator(cfg["model"], g, cfg),
                       family=cfg["model"], seed=cfg["seed"], n_trials=cfg["trials"])
    (out / "leaderboard.csv").write_text(board.to_csv(), encoding="utf-8")
    payload = board.to_json()
    payload["splits_source"] = splits_source
    _write_json(out / "leaderboard.json", payload)
    best = board.best
    if best is None:
        print(f"all {board.n_failed} trials failed", file=sys.stderr)
    else:
        print(f"best trial {best.index}: val {best.val_mean:.4f} +/- {best.val_std:.4f}, "
              f"test {best.test_mean:.4f} +/- {best.test_std:.4f} ({board.n_failed} failed)")
    write_manifest(out, "sweep", cfg, {"bundle": g.content_hash()},
                   ["leaderboard.csv", "leaderboard.json"], t0)
    return 0 if best is not None else 1


def cmd_simulate(cfg, t0):
    out = _out_dir(cfg)
    if cfg.get("bundle"):
        g, _ = resolve_bundle(cfg["bundle"])
    else:
        g = barbell_graph(*[int(v) for v in cfg["barbell"]])
    if cfg["steps"] < 1 or cfg["dt"] <= 0:
        raise UsageError("--steps must be >= 1 and --dt positive")
    grid = np.arange(cfg["steps"] + 1) * float(cfg["dt"])
    L_psd = psd_operator(g)
    f0 = default_initial_state(g.num_vertices, cfg["vertex"])
    heat = heat_propagate(L_psd, f0, grid)
    quantum = schrodinger_propagate(L_psd, f0, grid)
    with open(out / "snapshots.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "vertex", "heat", "quantum"])
        for ti, t in enumerate(grid.tolist()):
            for v in range(g.num_vertices):
                w.writerow([repr(t), v, repr(float(heat.snapshots[ti, v])),
                            repr(float(quantum.snapshots[ti, v]))])
    drift = float(np.max(np.abs(quantum.norms() - 1.0)))
    _write_json(out / "simulation.json", {
        "graph": g.name, "num_vertices": g.num_vertices, "operator": "I - L",
        "initial_state": {"kind": "unit mass", "vertex": cfg["vertex"]},
        "time_points": int(grid.size), "max_norm_drift": drift,
    })
    print(f"{g.name}: {grid.size} time points, max quantum norm drift {drift:.2e}")
    write_manifest(out, "simulate", cfg, {"graph": g.content_hash()},
                   ["snapshots.csv", "simulation.json"], t0)
    return 0


def cmd_homophily(cfg, t0):
    g, _ = resolve_bundle(cfg["bundle"])
    h = homophily(g)
    print(f"{h:.4f}")
    if cfg.get("out"):
        out = _out_dir(cfg)
        _write_json(out / "homophily.json", {"graph": g.name, "homophily": h,
                                             "num_vertices": g.num_vertices, "num_edges": g.num_edges})
        write_manifest(out, "homophily", cfg, {"bundle": g.content_hash()}, ["homophily.json"], t0)
    return 0


def cmd_spectrum(cfg, t0):
    g, _ = resolve_bundle(cfg["bundle"])
    out = _out_dir(cfg)
    curve = spectral_homophily(g, threshold=cfg["threshold"])
    (out / "spectral_homophily.csv").write_text(curve.to_csv(), encoding="utf-8")
    _write_json(out / "spectral_homophily.json", curve.to_json())
    top = curve.homophily[curve.eigenvalues > 0]
    peak = f"{top.max():.4f}" if top.size else "n/a"
    print(f"{len(curve.points)} eigenvalue clusters; global homophily {curve.global_homophily:.4f}; "
          f"max over upper half {peak}")
    write_manifest(out, "spectrum", cfg, {"bundle": g.content_hash()},
                   ["spectral_homophily.csv", "spectral_homophily.json"], t0)
    return 0


COMMANDS = {
    "ingest": cmd_ingest, "kernel": cmd_kernel, "train": cmd_train, "sweep": cmd_sweep,
    "simulate": cmd_simulate, "homophily": cmd_homophily, "spectrum": cmd_spectrum,
}


# -- argument parsing ---------------------------------------------------------

def _add_kernel_args(p, with_family=True):
    S = argparse.SUPPRESS
    if with_family:
        p.add_argument("--family", choices=("gaussian", "bandpass", "heat", "ppr"), default=S)
    p.add_argument("--mu", type=float, default=S, help="filter center (gaussian, bandpass)")
    p.add_argument("--sigma", type=float, default=S, help="gaussian width")
    p.add_argument("--gamma", type=float, default=S, help="band-pass half-width")
    p.add_argument("--alpha", type=float, default=S, help="pagerank teleport probability")
    p.add_argument("--t", type=float, default=S, help="heat diffusion time")
    p.add_argument("--eps", type=float, default=S, help="sparsification threshold")
    p.add_argument("--topk", type=int, default=S, help="entries kept per row")
    p.add_argument("--eigen-budget", dest="eigen_budget", type=int, default=S,
                   help="eigenpairs used (default min(512, N))")
    p.add_argument("--tol", type=float, default=S, help="eigensolver tolerance")


def build_parser():
    S = argparse.SUPPRESS
    common = argparse.ArgumentParser(add_help=False, argument_default=S)
    common.add_argument("--seed", type=int, help="root random seed (default 0)")
    common.add_argument("--config", help="JSON or YAML file of option values")

    parser = argparse.ArgumentParser(prog="qdc", parents=[common],
                                     description="Quantum diffusion convolution toolkit.")
    parser.add_argument("--version", action="version", version=f"qdc {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", default=S)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, parents=[common], help=help_, argument_default=S)
        p.add_argument("--out", help="output directory")
        return p

    p = add("ingest", "validate a graph bundle and write a canonical copy with stats")
    p.add_argument("--bundle", required=True)
    p.add_argument("--random-splits", dest="random_splits", action="store_true",
                   help="replace bundle splits with seeded stratified random splits")

    p = add("kernel", "build a rewired kernel and write it in binary form")
    p.add_argument("--bundle", required=True)
    _add_kernel_args(p)
    p.add_argument("--block-rows", dest="block_rows", type=int)

    p = add("train", "train a GCN on every split")
    p.add_argument("--bundle", required=True)
    _add_kernel_args(p)
    p.add_argument("--multiscale", action="store_true", help="Laplacian and kernel towers in parallel")
    p.add_argument("--combinator", choices=("concat", "add"))
    p.add_argument("--layers", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--kernel-layers", dest="kernel_layers", type=int)
    p.add_argument("--kernel-hidden", dest="kernel_hidden", type=int)
    p.add_argument("--kernel-dropout", dest="kernel_dropout", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--wd", type=float)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--splits", help="'all' or comma-separated split indices")

    p = add("sweep", "seeded random hyperparameter search")
    p.add_argument("--bundle", required=True)
    p.add_argument("--model", choices=sorted(SEARCH_SPACES))
    p.add_argument("--trials", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--tol", type=float)

    p = add("simulate", "heat versus Schroedinger propagation")
    p.add_argument("--barbell", nargs=2, type=int, metavar=("LOBE", "PATH"))
    p.add_argument("--bundle", help="simulate on a bundle instead of a barbell")
    p.add_argument("--steps", type=int)
    p.add_argument("--dt", type=float)
    p.add_argument("--vertex", type=int, help="vertex holding the initial unit mass")

    p = add("homophily", "print node homophily of a bundle")
    p.add_argument("--bundle", required=True)

    p = add("spectrum", "homophily of each eigenvalue cluster of the normalized operator")
    p.add_argument("--bundle", required=True)
    p.add_argument("--threshold", type=float)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if hasattr(args, "verbose"):
        del args.verbose
    command = args.command
    t0 = time.perf_counter()
    try:
        cfg = resolve_config(command, args)
        if command == "simulate" and cfg.get("bundle") and "barbell" in vars(args):
            raise UsageError("--barbell and --bundle are mutually exclusive")
        rc = COMMANDS[command](cfg, t0)
    except UsageError as exc:
        parser.error(str(exc))
    except (BundleError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
