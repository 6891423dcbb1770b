"""Command-line entry point: ``seqhash <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import platform
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .datagen import SyntheticSpec, generate, write_features
from .errors import ConfigError, FormatError, NumericError, SeqHashError, ShapeError
from .formats import read_codes, read_features, read_graph, read_labels, write_codes, write_graph
from .neighborhood import build_graph, build_graph_sharded, mean_pool
from .retrieval import DEFAULT_KS, hash_dataset, map_table, rank
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger("seqhash")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
LAMBDA_GRID = (0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1.0)
K_GRID = (5, 10, 20, 30, 40, 50)

# flag name -> TrainConfig field
TRAIN_FLAGS = {
    "code_len": "code_len",
    "stride": "stride",
    "m": "frames",
    "hidden1": "hidden1",
    "hidden2": "hidden2",
    "global_steps": "global_steps",
    "lambda_": "lam",
    "eta": "eta",
    "lr": "learning_rate",
    "lr_decay": "lr_decay",
    "clip_norm": "clip_norm",
    "epochs": "epochs",
    "batch": "batch_size",
    "seed": "seed",
    "activation": "activation",
    "k1": "k1",
    "k2": "k2",
}


class UsageError(SeqHashError):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return args.threads
    try:
        return max(1, int(os.environ.get("SSVH_THREADS", "1")))
    except ValueError:
        raise UsageError("SSVH_THREADS must be an integer") from None


def _int_list(text: str):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _write_manifest(path, command, config, inputs, outputs, seed, started):
    manifest = {
        "command": command,
        "config": config,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "seed": seed,
        "wall_clock_seconds": round(time.time() - started, 3),
        "tool_version": __version__,
        "python": platform.python_version(),
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _manifest_path(args, default):
    if getattr(args, "manifest", None):
        return Path(args.manifest)
    return default


# -- gen-data -----------------------------------------------------------------


def cmd_gen_data(args):
    started = time.time()
    spec = SyntheticSpec(
        n_videos=args.n,
        n_clusters=args.clusters,
        frames=args.m,
        dim=args.d,
        separation=args.sep,
        noise=args.noise,
        drift=args.drift,
        seed=args.seed,
    )
    ds = generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    feat, labl = out / "features.ssvh", out / "labels.ssvh"
    write_features(ds, feat, labl)
    config = {f.name: getattr(spec, f.name) for f in fields(spec)}
    _write_manifest(_manifest_path(args, out / "manifest.json"), "gen-data", config, {}, {"features": feat, "labels": labl}, args.seed, started)
    print(f"wrote {ds.n} videos ({ds.frames}x{ds.dim}) to {feat} and {labl}")
    return EXIT_OK


# -- build-graph --------------------------------------------------------------


def _graph_for(features, k1, k2, shards, threads):
    videos = mean_pool(features)
    n = videos.shape[0]
    shard_n = n // max(shards, 1)
    if k1 >= (shard_n if shards > 1 else n):
        raise ConfigError(f"K1={k1} must be smaller than the number of videos per graph ({shard_n if shards > 1 else n})")
    if shards > 1:
        return build_graph_sharded(videos, k1, k2, shards, threads)
    return build_graph(videos, k1, k2, threads)


def cmd_build_graph(args):
    started = time.time()
    x = read_features(args.features)
    graph = _graph_for(x, args.k1, args.k2, args.shards, _threads(args))
    write_graph(graph, args.out)
    config = {"k1": args.k1, "k2": args.k2, "shards": args.shards}
    _write_manifest(_manifest_path(args, Path(f"{args.out}.manifest.json")), "build-graph", config, {"features": args.features}, {"graph": args.out}, None, started)
    print(f"wrote graph over {graph.n} videos with {graph.num_edges()} edges to {args.out}")
    return EXIT_OK


# -- train --------------------------------------------------------------------


def _resolve_train_config(args, base: TrainConfig | None = None) -> TrainConfig:
    """Flags > config file > checkpoint/base > built-in defaults."""
    values = (base or TrainConfig()).to_dict()
    if getattr(args, "config", None):
        try:
            file_values = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {args.config}: {exc}") from None
        known = {f.name for f in fields(TrainConfig)}
        for key, value in file_values.items():
            key = TRAIN_FLAGS.get(key.replace("-", "_"), key)
            if key == "lambda":
                key = "lam"
            if key not in known:
                raise UsageError(f"unknown config key {key!r} in {args.config}")
            values[key] = value
    for flag, name in TRAIN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            values[name] = value
    return TrainConfig(**values)


def _write_loss_csv(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "recon", "neighbor", "total"])
        for r in history:
            w.writerow([r.epoch, repr(r.recon), repr(r.neighbor), repr(r.total)])


def loss_csv_path(checkpoint_path) -> Path:
    p = Path(checkpoint_path)
    return p.with_name(p.name + ".loss.csv")


def _run_training(features, graph, cfg, resume=None):
    ck, history = train(features, graph, cfg, resume=resume)
    return ck, history


def cmd_train(args):
    started = time.time()
    x = read_features(args.features)
    graph = read_graph(args.graph)
    if graph.n != x.shape[0]:
        raise ConfigError(f"graph covers {graph.n} videos but the feature file has {x.shape[0]}")
    resume = load_checkpoint(args.resume) if args.resume else None
    cfg = _resolve_train_config(args, resume.config if resume else None)
    if args.m is None and resume is None and cfg.frames != x.shape[1]:
        cfg = TrainConfig(**{**cfg.to_dict(), "frames": x.shape[1]})
    ck, history = _run_training(x, graph, cfg, resume)
    save_checkpoint(ck, args.out)
    csv_path = loss_csv_path(args.out)
    _write_loss_csv(history, csv_path)
    inputs = {"features": args.features, "graph": args.graph}
    if args.resume:
        inputs["resume"] = args.resume
    _write_manifest(
        _manifest_path(args, Path(f"{args.out}.manifest.json")),
        "train",
        {**cfg.to_dict(), "effective_batch_size": min(cfg.batch_size, x.shape[0]), "threads": _threads(args)},
        inputs,
        {"checkpoint": args.out, "loss_csv": csv_path},
        cfg.seed,
        started,
    )
    last = history[-1] if history else None
    if last is not None:
        print(f"epoch {last.epoch}: recon {last.recon:.6g} neighbor {last.neighbor:.6g} total {last.total:.6g}")
    print(f"wrote checkpoint {args.out} and {csv_path}")
    return EXIT_OK


# -- encode -------------------------------------------------------------------


def cmd_encode(args):
    started = time.time()
    ck = load_checkpoint(args.checkpoint)
    x = read_features(args.features)
    if x.shape[2] != ck.model.feature_dim or x.shape[1] != ck.model.frames:
        raise ShapeError(
            f"checkpoint expects videos of {ck.model.frames}x{ck.model.feature_dim}, feature file has {x.shape[1]}x{x.shape[2]}"
        )
    db = hash_dataset(ck.model, x)
    write_codes(db, args.out)
    _write_manifest(_manifest_path(args, Path(f"{args.out}.manifest.json")), "encode", {"code_len": db.code_len}, {"checkpoint": args.checkpoint, "features": args.features}, {"codes": args.out}, ck.config.seed, started)
    print(f"wrote {db.n} codes of {db.code_len} bits to {args.out}")
    return EXIT_OK


# -- retrieve -----------------------------------------------------------------


def cmd_retrieve(args):
    db = read_codes(args.codes)
    if not 0 <= args.query_index < db.n:
        raise UsageError(f"--query-index {args.query_index} outside [0, {db.n})")
    query = db.codes()[args.query_index]
    ranked = rank(query, db, exclude=args.query_index if args.exclude_self else None)
    k = len(ranked.indices) if args.topk is None else args.topk
    if k > len(ranked.indices):
        print(f"warning: --topk {k} exceeds {len(ranked.indices)} candidates; returning all", file=sys.stderr)
        k = len(ranked.indices)
    print("rank\tindex\tdistance")
    for r, (i, d) in enumerate(zip(ranked.indices[:k], ranked.distances[:k]), start=1):
        print(f"{r}\t{i}\t{d}")
    return EXIT_OK


# -- eval ---------------------------------------------------------------------


def format_table(rows, ks, label_header):
    head = [label_header] + [f"mAP@{k}" for k in ks]
    lines = ["  ".join(f"{h:>10}" for h in head)]
    for label, values in rows:
        lines.append("  ".join([f"{label:>10}"] + [f"{values[k]:>10.4f}" for k in ks]))
    return "\n".join(lines)


def write_table_csv(rows, ks, label_header, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([label_header] + [f"map@{k}" for k in ks])
        for label, values in rows:
            w.writerow([label] + [repr(values[k]) for k in ks])


def cmd_eval(args):
    started = time.time()
    labels = read_labels(args.labels)
    db = read_codes(args.codes, labels)
    report = map_table(db, args.topk, threads=_threads(args))
    rows = [("all", report.values)]
    print(format_table(rows, args.topk, "queries"))
    print(f"{report.n_queries} queries evaluated, {report.skipped} skipped (no relevant item)")
    if args.csv:
        write_table_csv(rows, args.topk, "queries", args.csv)
        _write_manifest(_manifest_path(args, Path(f"{args.csv}.manifest.json")), "eval", {"topk": list(args.topk), "skipped": report.skipped}, {"codes": args.codes, "labels": args.labels}, {"csv": args.csv}, None, started)
    return EXIT_OK


# -- sweep --------------------------------------------------------------------


def _parse_values(param, text):
    if text is None:
        return list(LAMBDA_GRID if param == "lambda" else K_GRID)
    try:
        conv = float if param == "lambda" else int
        return [conv(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"cannot parse --values {text!r} for {param}") from None


def cmd_sweep(args):
    x = read_features(args.features)
    labels = read_labels(args.labels)
    if labels.shape[0] != x.shape[0]:
        raise ConfigError(f"{labels.shape[0]} labels for {x.shape[0]} videos")
    values = _parse_values(args.param, args.values)
    base = _resolve_train_config(args)
    if args.m is None and base.frames != x.shape[1]:
        base = TrainConfig(**{**base.to_dict(), "frames": x.shape[1]})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    threads = _threads(args)
    fixed_graph = None
    if args.param == "lambda":
        fixed_graph = read_graph(args.graph) if args.graph else _graph_for(x, base.k1, base.k2, 1, threads)
        if fixed_graph.n != x.shape[0]:
            raise ConfigError(f"graph covers {fixed_graph.n} videos but the feature file has {x.shape[0]}")
    rows = []
    for value in values:
        started = time.time()
        field = {"lambda": "lam", "k1": "k1", "k2": "k2"}[args.param]
        cfg = TrainConfig(**{**base.to_dict(), field: value})
        graph = fixed_graph if fixed_graph is not None else _graph_for(x, cfg.k1, cfg.k2, 1, threads)
        ck, history = train(x, graph, cfg)
        report = map_table(hash_dataset(ck.model, x, labels), args.topk, threads=threads)
        label = f"{value:g}" if args.param == "lambda" else f"{cfg.k1}_{cfg.k2}"
        rows.append((label, report.values))
        row_dir = out / f"{args.param}={label}"
        row_dir.mkdir(exist_ok=True)
        _write_loss_csv(history, row_dir / "loss.csv")
        _write_manifest(
            row_dir / "manifest.json",
            "sweep",
            {**cfg.to_dict(), "param": args.param, "value": value},
            {"features": args.features, "labels": args.labels},
            {"table": out / "sweep.csv", "loss": row_dir / "loss.csv"},
            cfg.seed,
            started,
        )
        log.info("%s=%s map %s", args.param, label, report.values)
    header = "lambda" if args.param == "lambda" else "K1_K2"
    print(format_table(rows, args.topk, header))
    write_table_csv(rows, args.topk, header, out / "sweep.csv")
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def _add_train_flags(p, require_io=True):
    p.add_argument("--config", help="JSON file of training options (flags take precedence)")
    p.add_argument("--code-len", type=int, dest="code_len")
    p.add_argument("--stride", type=int)
    p.add_argument("--m", type=int, help="frames per video (default: taken from the feature file)")
    p.add_argument("--hidden1", type=int)
    p.add_argument("--hidden2", type=int)
    p.add_argument("--global-steps", type=int, dest="global_steps")
    p.add_argument("--lambda", type=float, dest="lambda_")
    p.add_argument("--eta", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-decay", type=float, dest="lr_decay")
    p.add_argument("--clip-norm", type=float, dest="clip_norm")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--activation", choices=["hard_sgn_ste", "tanh_relax"])


def build_parser():
    parser = Parser(prog="seqhash", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"seqhash {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    def common(p):
        p.add_argument("--threads", type=int, help="worker threads (default: $SSVH_THREADS or 1)")
        p.add_argument("--manifest", help="where to write the run manifest")

    p = sub.add_parser("gen-data", help="generate a synthetic labeled dataset")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--clusters", type=int, default=4)
    p.add_argument("--m", type=int, default=24)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--sep", type=float, default=10.0)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--drift", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True, help="output directory")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("build-graph", help="build the neighbor graph from a feature file")
    p.add_argument("--features", required=True)
    p.add_argument("--k1", type=int, default=20)
    p.add_argument("--k2", type=int, default=10)
    p.add_argument("--shards", type=int, default=1)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("train", help="train the hashing auto-encoder")
    p.add_argument("--features", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True, help="checkpoint path; the loss CSV is written next to it")
    p.add_argument("--resume", help="checkpoint to continue from")
    _add_train_flags(p)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="hash a feature file with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("retrieve", help="rank the database against one stored code")
    p.add_argument("--codes", required=True)
    p.add_argument("--query-index", type=int, required=True, dest="query_index")
    p.add_argument("--topk", type=int)
    p.add_argument("--exclude-self", action="store_true", dest="exclude_self")
    common(p)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("eval", help="mAP@K of a code file against labels")
    p.add_argument("--codes", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--topk", type=_int_list, default=list(DEFAULT_KS))
    p.add_argument("--csv")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train and evaluate over a grid of lambda, K1 or K2")
    p.add_argument("--param", choices=["lambda", "k1", "k2"], required=True)
    p.add_argument("--values", help="comma-separated values (default: the standard grid)")
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--graph", help="fixed graph for a lambda sweep (built from --k1/--k2 if absent)")
    p.add_argument("--k1", type=int)
    p.add_argument("--k2", type=int)
    p.add_argument("--topk", type=_int_list, default=list(DEFAULT_KS))
    p.add_argument("--out", required=True, help="output directory")
    _add_train_flags(p)
    common(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"seqhash {args.command}: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"seqhash {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ShapeError, OSError, ValueError) as exc:
        print(f"seqhash {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
