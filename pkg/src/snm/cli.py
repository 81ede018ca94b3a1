"""Command line entry point: prepare, pretrain, train, evaluate, export-attn.

Run settings come from built-in defaults, then an optional flat ``key=value``
config file, then command-line flags (flags win). Unknown config keys are
rejected before any work starts.
"""
from __future__ import annotations

import argparse
import dataclasses
import difflib
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .dataio import (
    SPLIT_NAMES,
    TEST,
    DatasetError,
    NeighborhoodIndex,
    SamplingError,
    filter_sparse,
    ingest_and_binarize,
    load_prepared,
    split_interactions,
    write_prepared,
)
from .evaluation import evaluate_model, export_relevance_heatmap, write_heatmap, write_report
from .model import MODES, CheckpointError, check_shapes, load_checkpoint
from .training import ConfigError, TrainConfig, TrainingDivergedError, fit

log = logging.getLogger("snm")


def _parse_bool(s: str) -> bool:
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


# config key -> (TrainConfig field or None for run-level keys, parser)
CONFIG_KEYS = {
    "dim": ("d", int),
    "layers": ("L", int),
    "mode": ("mode", str),
    "alpha": ("alpha", float),
    "neg_ratio": ("item_neg_ratio", int),
    "user_neg": ("user_neg", int),
    "batch_size": ("batch_size", int),
    "lr": ("lr0", float),
    "decay": ("decay", float),
    "decay_steps": ("decay_steps", int),
    "epochs": ("epochs", int),
    "patience": ("patience", int),
    "seed": ("seed", int),
    "cap_neighbors": ("cap", int),
    "clip_norm": ("clip_norm", float),
    "un_on_negatives": ("un_on_negatives", _parse_bool),
    "val_cases": ("val_cases", int),
    "data": (None, str),
    "out": (None, str),
    "init_from": (None, str),
}

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def read_config(path: str | Path) -> dict:
    """Flat ``key=value`` text; ``#`` starts a comment. Keys may use dashes."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = (x.strip() for x in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in CONFIG_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = value
    return out


def resolve_run(args: argparse.Namespace, forced: dict | None = None) -> tuple[TrainConfig, dict]:
    """Merge defaults, config file and flags into a validated TrainConfig
    plus the run-level keys (data, out, init_from)."""
    merged: dict = {}
    if args.config:
        merged.update(read_config(args.config))
    for key in CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    merged.update(forced or {})

    fields, run = {}, {"data": None, "out": None, "init_from": None}
    for key, raw in merged.items():
        target, parse = CONFIG_KEYS[key]
        try:
            value = parse(raw) if isinstance(raw, str) else raw
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {raw!r}") from e
        if target is None:
            run[key] = value
        else:
            fields[target] = value
    config = TrainConfig(**fields)
    config.validate()
    return config, run


def write_config(config: TrainConfig, run: dict, path: Path) -> None:
    names = {field: key for key, (field, _) in CONFIG_KEYS.items() if field}
    with open(path, "w", encoding="utf-8") as fh:
        for f in dataclasses.fields(config):
            fh.write(f"{names.get(f.name, f.name)}={getattr(config, f.name)}\n")
        for key in ("data", "init_from"):
            if run.get(key):
                fh.write(f"{key}={run[key]}\n")


# ---------------------------------------------------------------- commands


def cmd_prepare(args) -> int:
    t0 = time.perf_counter()
    pairs = ingest_and_binarize(args.input, threshold=args.threshold, binarize=not args.no_binarize)
    if args.subsample < 1.0:
        pairs = subsample_users(pairs, args.subsample, args.seed)
    store = filter_sparse(pairs, args.min_user_positives, args.min_item_users)
    store = split_interactions(store, seed=args.seed)
    write_prepared(store, args.out)
    M, N, R = store.n_users, store.n_items, len(store.pairs)
    counts = " ".join(f"{n}={int((store.labels == i).sum())}" for i, n in enumerate(SPLIT_NAMES))
    print(f"M={M} N={N} ratings={R} sparsity={1.0 - R / (M * N):.6f} {counts}")
    log.info("prepared %s in %.1fs", args.out, time.perf_counter() - t0)
    return EXIT_OK


def subsample_users(pairs: list, fraction: float, seed: int) -> list:
    """Keep a seeded random fraction of users with all their pairs."""
    users = list(dict.fromkeys(u for u, _ in pairs))
    rng = np.random.default_rng(seed)
    keep_n = max(1, int(round(fraction * len(users))))
    keep = {users[i] for i in rng.choice(len(users), keep_n, replace=False)}
    return [p for p in pairs if p[0] in keep]


def cmd_train(args, forced: dict | None = None) -> int:
    config, run = resolve_run(args, forced)
    if not run["data"] or not run["out"]:
        raise UsageError("train needs --data and --out (flag or config key)")
    store = load_prepared(run["data"])
    index = NeighborhoodIndex.from_store(store)
    init = None
    if run["init_from"]:
        init, _ = load_checkpoint(run["init_from"])
        check_shapes(init, store.n_users, store.n_items)
        if (init.dim, init.layers) != (config.d, config.L):
            raise ConfigError(
                f"--init-from has dim={init.dim} layers={init.layers}, run has dim={config.d} layers={config.L}"
            )
    out = Path(run["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_config(config, run, out / "config.txt")
    t0 = time.perf_counter()
    res = fit(store, index, config, init=init, outdir=out)
    last = res.history[-1]
    print(
        f"epochs={len(res.history)} best_epoch={res.best_epoch} train_loss={last['train_loss']:.6f} "
        f"val_HR@10={res.best_hr:.4f}"
    )
    log.info("trained in %.1fs (%.2fs/epoch)", time.perf_counter() - t0, (time.perf_counter() - t0) / len(res.history))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    params, meta = load_checkpoint(args.checkpoint)
    store = load_prepared(args.data)
    check_shapes(params, store.n_users, store.n_items)
    mode = args.mode or meta.get("mode", "full")
    cap = args.cap_neighbors or int(meta.get("cap", 50))
    split = SPLIT_NAMES.index(args.split)
    index = NeighborhoodIndex.from_store(store)
    report = evaluate_model(params, store, index, mode, cap, args.seed, split, args.k_max, audit=args.audit)
    write_report(report, args.out, (store.user_ids, store.item_ids))
    k = min(10, args.k_max)
    print(f"cases={report.n_cases} skipped={report.skipped} HR@{k}={report.hr[k]:.4f} NDCG@{k}={report.ndcg[k]:.4f}")
    return EXIT_OK


def lookup_id(value: str, ids: list, kind: str, internal: bool) -> int:
    if internal:
        try:
            i = int(value)
        except ValueError:
            raise UsageError(f"{kind} id {value!r} is not an integer") from None
        if not 0 <= i < len(ids):
            raise UsageError(f"{kind} id {i} out of range 0..{len(ids) - 1}")
        return i
    table = {x: i for i, x in enumerate(ids)}
    if value in table:
        return table[value]
    near = difflib.get_close_matches(value, ids, n=5, cutoff=0.0)
    raise UsageError(f"unknown {kind} id {value!r}; nearest valid ids: {', '.join(near)}")


def cmd_export_attn(args) -> int:
    params, _ = load_checkpoint(args.checkpoint)
    store = load_prepared(args.data)
    check_shapes(params, store.n_users, store.n_items)
    user = lookup_id(args.user, store.user_ids, "user", args.internal_ids)
    items = [lookup_id(v, store.item_ids, "item", args.internal_ids) for v in args.items]
    index = NeighborhoodIndex.from_store(store)
    table = export_relevance_heatmap(params, index, user, items, args.max_neighbors)
    for row, v in zip(table[1:], items):
        row[0] = v if args.internal_ids else store.item_ids[v]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    label = user if args.internal_ids else store.user_ids[user]
    path = out / f"heatmap_{label}.csv"
    write_heatmap(table, path)
    print(path)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _train_flags(p: argparse.ArgumentParser, with_mode: bool = True) -> None:
    p.add_argument("--config", help="flat key=value file; flags override it")
    p.add_argument("--data", help="prepared directory")
    p.add_argument("--out", help="output directory")
    p.add_argument("--init-from", dest="init_from", help="checkpoint to warm-start from")
    if with_mode:
        p.add_argument("--mode", choices=MODES)
    p.add_argument("--seed", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--alpha", type=float, help="user-neighbor loss weight")
    p.add_argument("--neg-ratio", dest="neg_ratio", type=int, help="sampled negative items per positive")
    p.add_argument("--user-neg", dest="user_neg", type=int, help="negative users per user-neighbor term")
    p.add_argument("--cap-neighbors", dest="cap_neighbors", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--decay", type=float, help="learning-rate factor per decay period")
    p.add_argument("--decay-steps", dest="decay_steps", type=int)
    p.add_argument("--clip-norm", dest="clip_norm", type=float)
    p.add_argument("--val-cases", dest="val_cases", type=int, help="validation positives per epoch, 0 = all")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="snm", description="Selective-neighborhood recommender on implicit feedback.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors on stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="ingest, binarize, filter and split a rating log")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-binarize", action="store_true", help="treat every event as a positive")
    p.add_argument("--threshold", type=float, default=3.0, help="ratings above this are positives")
    p.add_argument("--min-user-positives", type=int, default=5)
    p.add_argument("--min-item-users", type=int, default=2)
    p.add_argument("--subsample", type=float, default=1.0, help="fraction of users to keep")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="fit a model with early stopping")
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pretrain", help="train the neighborhood-free model (train --mode plain)")
    _train_flags(p, with_mode=False)
    p.set_defaults(func=lambda a: cmd_train(a, {"mode": "plain"}))

    p = sub.add_parser("evaluate", help="HR@k / NDCG@k with 99 sampled negatives")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k-max", dest="k_max", type=int, default=10)
    p.add_argument("--split", choices=SPLIT_NAMES[1:], default=SPLIT_NAMES[TEST])
    p.add_argument("--mode", choices=MODES, help="override the checkpoint's mode")
    p.add_argument("--cap-neighbors", dest="cap_neighbors", type=int)
    p.add_argument("--audit", action="store_true", help="assert neighborhoods only use train interactions")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-attn", help="relevance-score heatmap for one user")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--user", required=True)
    p.add_argument("--items", nargs="+", required=True)
    p.add_argument("--internal-ids", action="store_true", help="ids are internal indices, not dataset ids")
    p.add_argument("--max-neighbors", type=int, default=20)
    p.set_defaults(func=cmd_export_attn)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"snm {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, SamplingError, CheckpointError, TrainingDivergedError, OSError, ValueError) as e:
        print(f"snm {args.command}: error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
