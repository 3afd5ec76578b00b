"""``astcaps`` command line: train, eval, gradcheck, race, synth.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import checkpoint, gradcheck
from .config import ConfigError, RunConfig, load_config, parse_config
from .data import (DataError, DatasetSpec, SampleWindow, load_manifest_dataset, nearest_centroid_accuracy,
                   split, synth_generate, write_synthetic)
from .metrics import FEATURE_LAYERS, evaluate, export_features, write_metrics
from .model import ASTCapsNet
from .recurrent import convergence_race
from .spatiotemporal import WindowLayout
from .tensor import Rng, ShapeError
from .train import train, write_curve

log = logging.getLogger("astcaps")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class NumericFailure(RuntimeError):
    pass


def threads() -> int:
    raw = os.environ.get("ASTCAPS_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"ASTCAPS_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError("ASTCAPS_THREADS must be >= 0")
    return n


def _layout(cfg: RunConfig) -> WindowLayout:
    try:
        return WindowLayout(int(cfg.model["K"]), int(cfg.model["T"]))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"model layout: {exc}") from None


def load_run_data(cfg: RunConfig, data_root: str | None = None,
                  manifest: str | None = None) -> tuple[list[SampleWindow], DatasetSpec]:
    d = cfg.dataset
    layout = _layout(cfg)
    if manifest is None and d.kind == "synthetic":
        windows = synth_generate(d.n_classes, d.windows_per_class, layout, d.noise_sigma, Rng(d.seed))
        return windows, DatasetSpec(layout, d.n_classes, {f"class{c}": c for c in range(d.n_classes)})
    kind = "timeseries" if d.kind == "synthetic" else d.kind
    path = Path(manifest) if manifest else cfg.resolve(d.manifest)
    return load_manifest_dataset(path, kind, layout, d.stride, d.skip_timestamp, data_root or d.data_root)


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "out", None):
        cfg.out = args.out
    if getattr(args, "seed_init", None) is not None:
        cfg.seeds.init = args.seed_init
    if getattr(args, "seed_shuffle", None) is not None:
        cfg.seeds.shuffle = args.seed_shuffle
    return cfg


def _echo(cfg: RunConfig) -> dict:
    """Config as stored with outputs: manifest paths made absolute."""
    d = cfg.to_dict()
    if cfg.dataset.manifest:
        d["dataset"]["manifest"] = str(cfg.resolve(cfg.dataset.manifest).resolve())
    return d


def cmd_train(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    if args.manifest:
        cfg.dataset.manifest = str(Path(args.manifest).resolve())
        if cfg.dataset.kind == "synthetic":
            cfg.dataset.kind = "timeseries"
    windows, spec = load_run_data(cfg, args.data)
    model_cfg = cfg.model_config(spec.n_classes)
    train_set, test_set = split(windows, cfg.train.train_fraction, Rng(cfg.seeds.split))
    if cfg.train.batch_size > len(train_set):
        raise ConfigError(f"batch_size {cfg.train.batch_size} exceeds the {len(train_set)} training windows")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    echo = _echo(cfg)
    echo["model"] = model_cfg.to_dict()
    (out / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")
    print(f"data: {len(windows)} windows, {spec.n_classes} classes, "
          f"{len(train_set)} train / {len(test_set)} test")

    def report(row):
        if not np.isfinite(row["total"]):
            raise NumericFailure(f"non-finite loss at epoch {row['epoch']}")
        print(f"epoch {row['epoch']:3d}  total {row['total']:.4f}  l_tp {row['l_tp']:.4f}  "
              f"l_st {row['l_st']:.4f}  l_pc {row['l_pc']:.4f}  l_dc {row['l_dc']:.4f}  acc {row['acc']:.4f}",
              flush=True)

    model = ASTCapsNet(model_cfg, Rng(cfg.seeds.init))
    result = train(model, train_set, cfg.train.epochs, cfg.train.batch_size, Rng(cfg.seeds.shuffle),
                   lr=cfg.train.lr, bayes_alpha=cfg.train.bayes_alpha, on_epoch=report)
    write_curve(out / "train_curve.csv", result.curve)
    checkpoint.save(model, out / "model.ckpt", _echo(cfg))
    if model.bayes is None:
        print("no training epochs run; skipping evaluation")
        return 0
    metrics = evaluate(model, test_set)
    write_metrics(metrics, out, _class_names(spec))
    acc = metrics.accuracy
    print("test accuracy: " + "  ".join(f"{k} {v:.4f}" for k, v in acc.items())
          + f"  micro-AUC {metrics.auc_micro:.4f}")
    return 0


def _class_names(spec: DatasetSpec) -> list[str]:
    names = [""] * spec.n_classes
    for name, i in spec.label_map.items():
        names[i] = name
    return names


def cmd_eval(args) -> int:
    model, echo = checkpoint.load(args.checkpoint)
    cfg = parse_config(echo)
    if args.out:
        cfg.out = args.out
    windows, spec = load_run_data(cfg, args.data, args.manifest)
    if spec.n_classes > model.config.n_classes:
        raise DataError(f"data has {spec.n_classes} classes, model was trained on {model.config.n_classes}")
    bad = [w for w in windows if w.features.shape != (model.config.K * model.config.T,)]
    if bad:
        raise DataError(f"{bad[0].source}: window length {bad[0].features.size} does not match "
                        f"the model's {model.config.K}x{model.config.T} layout")
    if args.split == "all":
        selected = windows
    else:
        train_set, test_set = split(windows, cfg.train.train_fraction, Rng(cfg.seeds.split))
        selected = test_set if args.split == "test" else train_set
    out = Path(cfg.out)
    if model.bayes is None:
        raise ConfigError("checkpoint has no fitted Bayes layer (trained for 0 epochs?)")
    metrics = evaluate(model, selected)
    write_metrics(metrics, out, _class_names(spec))
    print("accuracy: " + "  ".join(f"{k} {v:.4f}" for k, v in metrics.accuracy.items())
          + f"  micro-AUC {metrics.auc_micro:.4f}")
    if args.export_features:
        path = export_features(model, selected, args.export_features, out / f"features_{args.export_features}.csv")
        print(f"features written to {path}")
    return 0


def cmd_gradcheck(args) -> int:
    if args.config:
        load_config(args.config)
    if args.tolerance <= 0:
        raise ConfigError("tolerance must be positive")
    errors = gradcheck.run_all(seed=args.seed)
    failed = []
    for name, err in errors.items():
        ok = err <= args.tolerance
        if not ok:
            failed.append(name)
        print(f"{name:14s} max rel err {err:.3e}  {'ok' if ok else 'FAIL'}")
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"all {len(errors)} layers within {args.tolerance:g}")
    return 0


def race_sequences(windows, layout: WindowLayout) -> tuple[np.ndarray, np.ndarray]:
    """Normalised windows as (M, T, K) sequences plus labels."""
    X = np.stack([w.features for w in windows])
    X = X / np.maximum(np.linalg.norm(X, axis=1, keepdims=True), 1e-12)
    seq = X.reshape(len(X), layout.K, layout.T).transpose(0, 2, 1)
    return np.ascontiguousarray(seq), np.array([w.label for w in windows])


def _race_one(job):
    seq, labels, n, seed, rc, kinds, out = job
    return convergence_race(seq, labels, n, [seed], rc.epochs, rc.hidden, rc.batch_size, rc.lr,
                            rc.threshold, kinds, out)[0]


def cmd_race(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    windows, spec = load_run_data(cfg)
    train_set, _ = split(windows, cfg.train.train_fraction, Rng(cfg.seeds.split))
    seq, labels = race_sequences(train_set, _layout(cfg))
    rc = cfg.race
    kinds = ("memory", "memory") if args.control else ("memory", "gru")
    jobs = [(seq, labels, spec.n_classes, s, rc, kinds, cfg.out) for s in rc.seeds]
    n_workers = threads()
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_race_one, jobs))
    else:
        results = [_race_one(job) for job in jobs]
    keys = list(results[0].curves)
    for r in results:
        print(f"seed {r.seed}: epochs to loss <= {rc.threshold:g}: "
              + ", ".join(f"{k} {_fmt(r.epochs_to_threshold[k])}" for k in keys))
    medians = {k: _median([r.epochs_to_threshold[k] for r in results], rc.epochs) for k in keys}
    print("median epochs: " + ", ".join(f"{k} {_fmt(v)}" for k, v in medians.items()))
    summary = {"threshold": rc.threshold, "epochs": rc.epochs, "kinds": keys, "medians": medians,
               "per_seed": {str(r.seed): {k: r.epochs_to_threshold[k] for k in keys} for r in results}}
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    name = "race_control_summary.json" if args.control else "race_summary.json"
    (out / name).write_text(json.dumps(summary, indent=2) + "\n")
    return 0


def _fmt(v) -> str:
    return "never" if v is None else f"{v:g}"


def _median(values, epochs):
    # runs that never reach the threshold count as epochs + 1
    return statistics.median(epochs + 1 if v is None else v for v in values)


def cmd_synth(args) -> int:
    if args.config:
        cfg = load_config(args.config)
        d, layout = cfg.dataset, _layout(cfg)
        n_classes, per_class, sigma, seed = d.n_classes, d.windows_per_class, d.noise_sigma, d.seed
    else:
        try:
            K, T_ = (int(v) for v in args.layout.lower().split("x"))
            layout = WindowLayout(K, T_)
        except ValueError as exc:
            raise ConfigError(f"--layout must look like 12x10: {exc}") from None
        n_classes, per_class, sigma, seed = args.n_classes, args.windows_per_class, args.noise_sigma, args.seed
    if n_classes < 2 or per_class < 2 or sigma < 0:
        raise ConfigError("synth needs n_classes >= 2, windows_per_class >= 2 and noise_sigma >= 0")
    windows = synth_generate(n_classes, per_class, layout, sigma, Rng(seed))
    out = Path(args.out or "runs/synthetic")
    manifest = write_synthetic(out, windows, layout)
    tr, te = split(windows, 0.8, Rng(seed))
    acc = nearest_centroid_accuracy(tr, te)
    print(f"wrote {len(windows)} windows and {manifest}; nearest-centroid test accuracy {acc:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="astcaps", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="load data, split, train, evaluate, checkpoint")
    t.add_argument("--config", required=True)
    t.add_argument("--data", help="root directory for manifest paths")
    t.add_argument("--manifest")
    t.add_argument("--out")
    t.add_argument("--seed-init", type=int)
    t.add_argument("--seed-shuffle", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--manifest")
    e.add_argument("--out")
    e.add_argument("--split", choices=("test", "train", "all"), default="test",
                   help="which part of the seeded split to score (default: test)")
    e.add_argument("--export-features", choices=FEATURE_LAYERS)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    g.add_argument("--config")
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("race", help="memory cell vs plain GRU convergence")
    r.add_argument("--config", required=True)
    r.add_argument("--out")
    r.add_argument("--seed-init", type=int)
    r.add_argument("--seed-shuffle", type=int)
    r.add_argument("--control", action="store_true", help="race the memory cell against itself")
    r.set_defaults(func=cmd_race)

    s = sub.add_parser("synth", help="write a synthetic dataset and manifest")
    s.add_argument("--config")
    s.add_argument("--out")
    s.add_argument("--n-classes", type=int, default=4)
    s.add_argument("--windows-per-class", type=int, default=200)
    s.add_argument("--layout", default="12x10")
    s.add_argument("--noise-sigma", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=7)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ShapeError, checkpoint.CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, NumericFailure, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
