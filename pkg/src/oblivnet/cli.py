"""Command-line front-end: train, eval, audit-trace, bench-lsh, subset,
plot-data.

Configuration is a JSON file whose keys mirror the public parameter
names; command-line flags override file values.  Exit codes: 0 success,
2 config error, 3 data error, 4 audit divergence, 5 capacity-contract
violation.  ``OBLIVNET_TRACE=1`` forces trace recording.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional

import numpy as np

from . import trace as trace_mod
from .dataio import (DataFormatError, parse_xc, randomize_private, subset_cover_fill,
                     synth_xc, write_subset)
from .engine import (PublicParams, evaluate_p_at_1, load_checkpoint, run_traced,
                     save_checkpoint, train_loop)
from .lsh import LshConfig
from .oht import CapacityError, OhtConfig
from .trace import TraceRecorder, assert_equal, digest, write_trace_file

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4
EXIT_CAPACITY = 5


class ConfigError(Exception):
    pass


def _load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc


def _apply_overrides(cfg: dict, args: argparse.Namespace) -> dict:
    cfg = dict(cfg)
    for key in ("workers", "epochs", "batch_size"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if getattr(args, "seed", None) is not None:
        cfg["seed_weights"] = args.seed
    for opt in ("o1", "o2", "o3"):
        val = getattr(args, opt, None)
        if val is not None:
            cfg[opt] = val
    return cfg


def _build_params(cfg: dict, dataset=None) -> PublicParams:
    try:
        lsh_cfg = cfg.get("lsh", {})
        lsh = LshConfig(
            k=lsh_cfg.get("k", 2), m=lsh_cfg.get("m", 4),
            pad_size=lsh_cfg.get("pad_size", 8), r=lsh_cfg.get("r", 3),
            n_perturb=lsh_cfg.get("n_perturb"),
            rebuild_period=lsh_cfg.get("rebuild_period", 0),
        )
        oht = None
        if cfg.get("oht"):
            oht = OhtConfig(**cfg["oht"])
        d_input = cfg.get("d_input") or (dataset.num_features if dataset else None)
        n_classes = cfg.get("n_classes") or (dataset.num_labels if dataset else None)
        if d_input is None or n_classes is None:
            raise ConfigError("d_input/n_classes missing and no dataset to infer from")
        return PublicParams(
            d_input=d_input, n_hidden=cfg.get("n_hidden", 16), n_classes=n_classes,
            lsh=lsh, oht=oht,
            batch_size=cfg.get("batch_size", 8), epochs=cfg.get("epochs", 1),
            lr=cfg.get("lr", 1e-4), beta1=cfg.get("beta1", 0.9),
            beta2=cfg.get("beta2", 0.999), eps=cfg.get("eps", 1e-8),
            o1=cfg.get("o1", True), o2=cfg.get("o2", True), o3=cfg.get("o3", True),
            workers=cfg.get("workers", 1),
            seed_weights=cfg.get("seed_weights", 0), seed_lsh=cfg.get("seed_lsh", 1),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _load_train_data(cfg: dict):
    paths = cfg.get("paths", {})
    if paths.get("train"):
        return parse_xc(paths["train"])
    synth = cfg.get("synth")
    if synth:
        return synth_xc(
            d_input=cfg["d_input"], n_classes=cfg["n_classes"],
            n=synth.get("n_train", 128), nnz=synth.get("nnz", 8),
            clusters=synth.get("clusters", 4), seed=synth.get("seed", 0),
            labels_per_example=synth.get("labels_per_example", 1),
        )
    raise ConfigError("no training data: set paths.train or synth in the config")


def _load_eval_data(cfg: dict):
    paths = cfg.get("paths", {})
    if paths.get("test"):
        return parse_xc(paths["test"])
    synth = cfg.get("synth")
    if synth and synth.get("n_test"):
        return synth_xc(
            d_input=cfg["d_input"], n_classes=cfg["n_classes"],
            n=synth["n_test"], nnz=synth.get("nnz", 8),
            clusters=synth.get("clusters", 4), seed=synth.get("seed", 0) + 7,
            labels_per_example=synth.get("labels_per_example", 1),
        )
    return None


def _trace_mode(args) -> bool:
    return os.environ.get("OBLIVNET_TRACE") == "1" or bool(
        getattr(args, "trace_out", None)
    )


def _write_metrics(path: str, cfg: dict, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# config: " + json.dumps(cfg, sort_keys=True) + "\n")
        fh.write("epoch,batch,p_at_1,loss,wall_seconds\n")
        for r in rows:
            fh.write(
                f"{r['epoch']},{r['batch']},{r['p_at_1']},{r['loss']},{r['wall_seconds']}\n"
            )


def cmd_train(args) -> int:
    cfg = _apply_overrides(_load_config(args.config), args)
    train = _load_train_data(cfg)
    test = _load_eval_data(cfg)
    params = _build_params(cfg, train)
    rec = TraceRecorder(enabled=True) if _trace_mode(args) else None
    result = train_loop(
        train.examples, params,
        eval_examples=test.examples if test else None, rec=rec,
    )
    paths = cfg.get("paths", {})
    metrics_path = paths.get("metrics", "metrics.csv")
    _write_metrics(metrics_path, cfg, result.metrics)
    ckpt = paths.get("checkpoint", "model.tnnr")
    save_checkpoint(result.model, ckpt, extra_config=cfg)
    print(f"trained {len(result.batch_seconds)} batches; "
          f"mean per-batch wall {result.mean_batch_seconds:.4f}s "
          f"(workers={params.workers})")
    print(f"checkpoint: {ckpt}")
    print(f"metrics: {metrics_path}")
    if rec is not None:
        if args.trace_out:
            write_trace_file(rec.log, args.trace_out)
            print(f"trace: {args.trace_out}")
        print(f"trace digest: {digest(rec.log)}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    test = parse_xc(args.test)
    if test.num_examples == 0:
        raise DataFormatError("empty test set")
    if test.num_labels > model.params.n_classes:
        raise DataFormatError(
            f"test labels ({test.num_labels}) exceed model classes "
            f"({model.params.n_classes})"
        )
    p1 = evaluate_p_at_1(model, test.examples)
    print(f"p_at_1 {p1:.6f}")
    if args.metrics:
        with open(args.metrics, "a", encoding="utf-8") as fh:
            fh.write(f"eval,{args.test},{p1},,\n")
    return EXIT_OK


def cmd_audit(args) -> int:
    cfg = _apply_overrides(_load_config(args.config), args)
    if "synth" not in cfg:
        raise ConfigError("audit-trace needs a synth block in the config")
    base = _load_train_data(cfg)
    params = _build_params(cfg, base)
    ok = True
    for t in range(args.trials):
        ds_a = randomize_private(base, seed=1000 + 2 * t)
        ds_b = randomize_private(base, seed=1000 + 2 * t + 1)
        pa = PublicParams.from_dict(params.as_dict())
        pb = PublicParams.from_dict(params.as_dict())
        pa.seed_weights = 7000 + 2 * t
        pb.seed_weights = 7000 + 2 * t + 1
        _, log_a = run_traced(ds_a.examples, pa, fault_inject=args.fault_inject)
        _, log_b = run_traced(ds_b.examples, pb, fault_inject=args.fault_inject)
        da, db = digest(log_a), digest(log_b)
        equal, div = assert_equal(log_a, log_b)
        print(f"trial {t}: digests {da[:16]}.. / {db[:16]}.. "
              f"{'EQUAL' if equal else 'DIVERGED'}")
        if not equal:
            ok = False
            print(f"  {div}")
    if not ok:
        print("audit: FAIL (trace divergence)")
        return EXIT_DIVERGENCE
    print(f"audit: PASS ({args.trials} trials)")
    return EXIT_OK


def cmd_bench_lsh(args) -> int:
    from .bench import bench_csv, run_bench

    rows = run_bench(
        n_points=args.points, n_queries=args.queries, dim=args.dim,
        clusters=args.clusters, k=args.k, m=args.m, max_tables=args.tables,
        top_k=args.top_k, seed=args.seed or 0,
    )
    text = bench_csv(rows)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_subset(args) -> int:
    train = parse_xc(args.train)
    test = parse_xc(args.test)
    result = subset_cover_fill(
        train, test, multiplier=args.multiplier, seed=args.seed or 0,
        base_instances=args.base_instances, base_labels=args.base_labels,
    )
    paths = write_subset(result, args.out_dir)
    for p in paths:
        print(p)
    if not result.stats["budget_attained"]:
        print("note: instance budget not attained; see stats.json")
    return EXIT_OK


def cmd_plot_data(args) -> int:
    rows = []
    with open(args.metrics, "r", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln and not ln.startswith("#")]
    if not lines or lines[0].split(",")[:2] != ["epoch", "batch"]:
        raise DataFormatError(f"{args.metrics}: not a metrics CSV")
    wall_total = 0.0
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 5:
            raise DataFormatError(f"{args.metrics}: malformed row {ln!r}")
        try:
            epoch = int(parts[0])
            p1 = float(parts[2])
            wall = float(parts[4])
        except ValueError as exc:
            raise DataFormatError(f"{args.metrics}: malformed row {ln!r}") from exc
        wall_total += wall
        rows.append(("accuracy_vs_epoch", epoch, p1))
        rows.append(("time_vs_accuracy", wall_total, p1))
    out = "series,x,y\n" + "".join(f"{s},{x},{y}\n" for s, x, y in rows)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(out)
    else:
        sys.stdout.write(out)
    return EXIT_OK


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--trace-out", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    for opt in ("o1", "o2", "o3"):
        p.add_argument(f"--{opt}", dest=opt, action="store_true", default=None)
        p.add_argument(f"--no-{opt}", dest=opt, action="store_false")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="oblivnet")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="precision@1 of a checkpoint on a test file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--metrics", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("audit-trace", help="pairwise trace-equality audit")
    _add_common(p)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--fault-inject", action="store_true",
                   help="enable the deliberately non-oblivious scan (expected to fail)")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("bench-lsh", help="recall table for WTA vs MP-WTA")
    p.add_argument("--points", type=int, default=1000)
    p.add_argument("--queries", type=int, default=50)
    p.add_argument("--dim", type=int, default=24)
    p.add_argument("--clusters", type=int, default=8)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--m", type=int, default=8)
    p.add_argument("--tables", type=int, default=50)
    p.add_argument("--top-k", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench_lsh)

    p = sub.add_parser("subset", help="label-budgeted cover-and-fill subset")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--multiplier", type=int, required=True, choices=(1, 2, 3))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="subset_out")
    p.add_argument("--base-instances", type=int, default=14146)
    p.add_argument("--base-labels", type=int, default=30938)
    p.set_defaults(func=cmd_subset)

    p = sub.add_parser("plot-data", help="reshape metrics CSV for plotting")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_plot_data)
    return ap


def main(argv: Optional[list[str]] = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CapacityError as exc:
        print(f"capacity contract violation: {exc}", file=sys.stderr)
        return EXIT_CAPACITY


if __name__ == "__main__":
    sys.exit(main())
