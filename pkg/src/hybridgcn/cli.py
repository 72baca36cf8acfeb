"""Command-line front end: partition, plan, train, perfmodel, bench, synth.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Options may also come from ``--config FILE`` (``key = value`` lines, ``#``
comments, keys spelled like the long flags); explicit flags win.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from . import figures
from . import perfmodel as pm
from .engine import TrainConfig, prepare, save_checkpoint, train, train_rank, write_metrics
from .engine.worker import TrainingDiverged
from .graph import (GraphFormatError, Partition, build_subgraphs, cut_edges, import_partition,
                    load_graph, partition_weighted, save_binary, save_edge_list, save_partition,
                    save_sidecars, sbm_graph)
from .kernels import build_plan, index_add_naive, index_add_opt
from .plan import VOLUME_KEYS, plan_all
from .transport import TransportError, rank_from_env, read_hosts

PRECISIONS = {"fp32": None, "int2": 2, "int4": 4, "int8": 8}


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# config files
# --------------------------------------------------------------------------

def read_config(path) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise UsageError(f"{path}:{n}: expected 'key = value'")
            out[key.strip().replace("-", "_")] = val.strip()
    return out


def _parse_bool(text: str) -> bool:
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def _apply_config(parser: argparse.ArgumentParser, values: dict[str, str]) -> None:
    actions = {a.dest: a for a in parser._actions}
    defaults = {}
    for key, raw in values.items():
        act = actions.get(key)
        if act is None or key in ("config", "help"):
            raise UsageError(f"unknown config key {key!r}")
        if isinstance(act, (argparse._StoreTrueAction, argparse._StoreFalseAction,
                            argparse.BooleanOptionalAction)):
            defaults[key] = _parse_bool(raw)
            continue
        conv = act.type or str
        try:
            val = [conv(v) for v in raw.split(",")] if act.nargs in ("+", "*") else conv(raw)
        except (TypeError, ValueError):
            raise UsageError(f"config key {key}: bad value {raw!r}") from None
        if act.choices is not None and val not in act.choices:
            raise UsageError(f"config key {key}: {raw!r} not one of {sorted(act.choices)}")
        defaults[key] = val
    parser.set_defaults(**defaults)


# --------------------------------------------------------------------------
# shared helpers
# --------------------------------------------------------------------------

def _graph_args(p):
    g = p.add_argument_group("graph")
    g.add_argument("--graph", help="edge list ('src dst' per line) or binary CSR file")
    g.add_argument("--format", choices=("edge-list", "binary-csr"), default="edge-list")
    g.add_argument("--num-nodes", type=int)
    g.add_argument("--symmetrize", action="store_true")
    g.add_argument("--features")
    g.add_argument("--labels")
    g.add_argument("--masks")
    g.add_argument("--synthetic", choices=("sbm",), help="generate a graph instead of loading one")
    g.add_argument("--nodes", type=int, default=1000)
    g.add_argument("--blocks", type=int, default=4)
    g.add_argument("--feat-dim", type=int, default=32)
    g.add_argument("--p-in", type=float, default=0.02)
    g.add_argument("--p-out", type=float, default=0.002)
    g.add_argument("--noise", type=float, default=1.0)
    g.add_argument("--graph-seed", type=int, default=0)


def _load(args):
    if args.synthetic:
        return sbm_graph(args.nodes, args.blocks, args.p_in, args.p_out, args.feat_dim,
                         args.noise, seed=args.graph_seed)
    if not args.graph:
        raise UsageError("either --graph or --synthetic is required")
    for attr in ("graph", "features", "labels", "masks"):
        path = getattr(args, attr)
        if path is not None and not Path(path).exists():
            raise UsageError(f"{attr} file not found: {path}")
    return load_graph(args.graph, args.format, args.num_nodes, args.symmetrize,
                      args.features, args.labels, args.masks)


def _partition(args, g) -> Partition:
    if getattr(args, "partition", None):
        if not Path(args.partition).exists():
            raise UsageError(f"partition file not found: {args.partition}")
        return import_partition(args.partition, g.num_nodes, args.parts)
    parts = args.parts or 1
    if parts < 1:
        raise UsageError("--parts must be >= 1")
    return partition_weighted(g, parts, args.weight_mode, seed=args.seed, tolerance=args.tolerance)


def _partition_args(p, required_parts=False):
    p.add_argument("--parts", type=int, required=required_parts)
    p.add_argument("--partition", help="existing partition file (one part id per line)")
    p.add_argument("--weight-mode", choices=("uniform", "indegree-plus-trainmask"),
                   default="indegree-plus-trainmask")
    p.add_argument("--tolerance", type=float, default=0.05)


def _out_dir(args) -> Path | None:
    if not args.out:
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path, columns, rows, summary: dict | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])
        if summary is not None:
            fh.write("# " + " ".join(f"{k}={_fmt(v)}" for k, v in summary.items()) + "\n")


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_partition(args) -> int:
    g = _load(args)
    part = _partition(args, g)
    cut = cut_edges(g, part.assignment)
    print(f"parts={part.num_parts} nodes={g.num_nodes} edges={g.num_edges} "
          f"cut_edges={cut} imbalance={part.imbalance:.4f}")
    out = _out_dir(args)
    if out:
        save_partition(part, out / "partition.txt")
    return 0


def _volumes(g, part):
    subs = build_subgraphs(g, part)
    plan = plan_all(subs)
    rows = plan.volume_rows()
    tot = plan.volumes
    summary = {"total_" + k: tot[k] for k in VOLUME_KEYS}
    if tot["hybrid"]:
        summary["min_pre_post_over_hybrid"] = min(tot["pre"], tot["post"]) / tot["hybrid"]
    if tot["vanilla"]:
        summary["hybrid_over_vanilla"] = tot["hybrid"] / tot["vanilla"]
    return plan, rows, summary


def cmd_plan(args) -> int:
    g = _load(args)
    part = _partition(args, g)
    plan, rows, summary = _volumes(g, part)
    print(" ".join(f"{k}={_fmt(v)}" for k, v in summary.items()))
    out = _out_dir(args)
    if out:
        save_partition(part, out / "partition.txt")
        (out / "plan.bin").write_bytes(plan.to_bytes())
        _write_csv(out / "volumes.csv", ("pair",) + VOLUME_KEYS + ("matching_size",), rows, summary)
        figures.plot_volumes(rows, out / "volumes.png")
    return 0


def _train_config(args, workers) -> TrainConfig:
    try:
        return TrainConfig(
            num_layers=args.layers, hidden=args.hidden, model=args.model,
            aggregation=args.aggregation, activation=args.activation, norm=args.norm,
            bias=args.bias, epochs=args.epochs, lr=args.lr, optimizer=args.optimizer,
            bits=PRECISIONS[args.precision], quantize_backward=args.quantize_backward,
            label_prop=args.label_prop, label_rate=args.label_rate, seed=args.seed,
            num_workers=workers, backend=args.backend, kernel_threads=args.threads,
            dtype=args.dtype, timeout=args.timeout)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args) -> int:
    if args.epochs < 0:
        raise UsageError("--epochs must be >= 0")
    g = _load(args)
    if args.partition is None and args.parts is None:
        args.parts = args.workers
    part = _partition(args, g)
    cfg = _train_config(args, part.num_parts)
    out = _out_dir(args)

    def progress(row):
        if args.verbose:
            print(f"epoch {row['epoch']:4d} loss {row['loss']:.4f} val {row['val_acc']:.4f} "
                  f"test {row['test_acc']:.4f}", file=sys.stderr)

    t0 = time.perf_counter()
    if args.hosts:
        if not Path(args.hosts).exists():
            raise UsageError(f"hosts file not found: {args.hosts}")
        rank = args.rank if args.rank is not None else rank_from_env()
        if rank is None:
            raise UsageError("TCP runs with --hosts need --rank or HYBRIDGCN_RANK")
        cfg.backend = "tcp"
        result = train_rank(g, cfg, rank, read_hosts(args.hosts), setup=prepare(g, cfg, part),
                            callback=progress)
        if rank != 0:
            return 0
    else:
        result = train(g, cfg, partition=part, callback=progress)
    wall = time.perf_counter() - t0
    final = result.final
    summary = {"epochs": cfg.epochs, "precision": args.precision, "label_prop": int(cfg.label_prop),
               "workers": cfg.num_workers,
               "final_test_acc": final.get("test_acc", float("nan")),
               "final_val_acc": final.get("val_acc", float("nan")),
               "total_bytes": sum(r["bytes_sent"] for r in result.history),
               "wall_s": wall}
    print(" ".join(f"{k}={_fmt(v)}" for k, v in summary.items()))
    if out:
        write_metrics(result.history, out / "metrics.csv", summary)
        save_checkpoint(result.params, out / "checkpoint.bin")
        save_partition(result.setup.partition, out / "partition.txt")
        (out / "plan.bin").write_bytes(result.setup.plan.to_bytes())
        rows = result.setup.plan.volume_rows()
        _, _, vsum = _volumes(g, result.setup.partition)
        _write_csv(out / "volumes.csv", ("pair",) + VOLUME_KEYS + ("matching_size",), rows, vsum)
        figures.plot_training(result.history, out / "training.png")
    return 0


def cmd_perfmodel(args) -> int:
    if not Path(args.inputs).exists():
        raise UsageError(f"inputs file not found: {args.inputs}")
    try:
        inp = pm.parse_inputs(Path(args.inputs).read_text())
        rep = pm.report(inp, args.omit_prequant)
    except ValueError as exc:
        raise UsageError(f"{args.inputs}: {exc}") from None
    cols = ("t_comm", "t_quant_comm", "speedup_exact", "speedup_approx", "regime")
    print(",".join(cols))
    print(",".join(_fmt(rep[c]) for c in cols))
    if rep["approx_flag"]:
        print(f"# approximation differs from exact by {rep['approx_error']:.1%}", file=sys.stderr)
    out = _out_dir(args)
    if out:
        keys = list(rep)
        _write_csv(out / "perfmodel.csv", keys, [rep],
                   {"alpha": rep["alpha"], "beta": rep["beta"], "gamma": rep["gamma"],
                    "delta": rep["delta"]})
    if args.sweep == "delta":
        rows = pm.delta_sweep(inp.gamma, inp.alpha, inp.beta)
        if out:
            _write_csv(out / "sweep.csv", ("delta", "exact", "approx"), rows,
                       {"gamma": inp.gamma, "alpha": inp.alpha, "beta": inp.beta})
            figures.plot_speedup_delta(rows, out / "speedup_delta.png", inp.gamma)
    elif args.sweep == "workers":
        total = float(inp.comm.sum())
        total_params = float(inp.params.sum())
        workers = [int(w) for w in np.unique(np.geomspace(2, args.max_workers, 40).astype(int))]
        rows = pm.worker_sweep(total, total_params, inp.bandwidth, inp.latency,
                               inp.throughput, inp.bits, workers)
        cx = pm.crossover(total, total_params, inp.bandwidth, inp.latency, inp.bits,
                          2, args.max_workers)
        summary = {"crossover_plain": cx.plain, "crossover_quant": cx.quant,
                   "time_saved": cx.time_saved if cx.time_saved is not None else "none"}
        print(" ".join(f"{k}={_fmt(v)}" for k, v in summary.items()))
        if out:
            _write_csv(out / "sweep.csv", ("workers", "t_comm", "t_quant_comm", "speedup", "regime"),
                       rows, summary)
            figures.plot_worker_sweep(rows, out / "speedup_workers.png", cx)
    return 0


def run_bench(rows: int, feat_dims, threads, repeats: int = 5, seed: int = 0,
              clusters: int | None = None) -> list[dict]:
    """Time naive vs planned ``index_add`` on random scatter workloads."""
    rng = np.random.default_rng(seed)
    out = []
    for f in feat_dims:
        src = rng.standard_normal((rows, f)).astype(np.float32)
        nclu = clusters or max(1, rows // 8)
        idx = rng.integers(nclu, size=rows)
        dst = np.zeros((nclu, f), np.float32)
        t_naive = _best_time(lambda: index_add_naive(dst, src, idx), repeats)
        for t in threads:
            plan = build_plan(idx, f, t)
            t_opt = _best_time(lambda: index_add_opt(dst, src, plan), repeats)
            out.append({"rows": rows, "F": f, "threads": t, "ns_per_op": t_opt * 1e9,
                        "naive_ns_per_op": t_naive * 1e9, "speedup": t_naive / t_opt})
    return out


def _best_time(fn, repeats):
    best = float("inf")
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cmd_bench(args) -> int:
    if args.rows < 1 or any(f < 1 for f in args.feat_dims) or any(t < 1 for t in args.threads):
        raise UsageError("rows, feature widths and thread counts must be positive")
    rows = run_bench(args.rows, args.feat_dims, args.threads, args.repeats, args.seed)
    cols = ("rows", "F", "threads", "ns_per_op", "speedup")
    print(",".join(cols))
    for r in rows:
        print(",".join(_fmt(r[c]) for c in cols))
    out = _out_dir(args)
    if out:
        best = max(rows, key=lambda r: r["speedup"])
        _write_csv(out / "bench.csv", cols + ("naive_ns_per_op",), rows,
                   {"best_speedup": best["speedup"], "best_threads": best["threads"],
                    "best_F": best["F"]})
        figures.plot_bench(rows, out / "bench.png")
    return 0


def cmd_synth(args) -> int:
    g = sbm_graph(args.nodes, args.blocks, args.p_in, args.p_out, args.feat_dim, args.noise,
                  seed=args.graph_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.binary:
        save_binary(g, out / "graph.csr")
    else:
        save_edge_list(g, out / "graph.el")
        save_sidecars(g, out / "graph")
    print(f"nodes={g.num_nodes} edges={g.num_edges} classes={g.num_classes} features={g.feat_dim}")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hybridgcn", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="key = value defaults file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=fn)
        return p

    p = add("partition", cmd_partition, "split a graph into balanced parts")
    _graph_args(p)
    _partition_args(p)

    p = add("plan", cmd_plan, "build the boundary exchange plan and report volumes")
    _graph_args(p)
    _partition_args(p)

    p = add("train", cmd_train, "train a GraphSAGE/GCN model")
    _graph_args(p)
    _partition_args(p)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--model", choices=("sage", "gcn"), default="sage")
    p.add_argument("--aggregation", choices=("mean", "sum"), default="mean")
    p.add_argument("--activation", choices=("relu", "none"), default="relu")
    p.add_argument("--norm", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--bias", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
    p.add_argument("--precision", choices=tuple(PRECISIONS), default="fp32")
    p.add_argument("--quantize-backward", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--label-prop", action="store_true")
    p.add_argument("--label-rate", type=float, default=0.62)
    p.add_argument("--backend", choices=("inproc", "tcp"), default="inproc")
    p.add_argument("--hosts", help="host:port per rank; runs this process as one rank")
    p.add_argument("--rank", type=int, help="rank id for --hosts runs (else $HYBRIDGCN_RANK)")
    p.add_argument("--threads", type=int, default=1, help="aggregation threads per worker")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--verbose", "-v", action="store_true")

    p = add("perfmodel", cmd_perfmodel, "evaluate the communication time model")
    p.add_argument("--inputs", required=True, help="key = value model inputs")
    p.add_argument("--omit-prequant", action="store_true")
    p.add_argument("--sweep", choices=("delta", "workers"))
    p.add_argument("--max-workers", type=int, default=4096)

    p = add("bench", cmd_bench, "naive vs optimized index_add timings")
    p.add_argument("--rows", type=int, default=100_000)
    p.add_argument("--feat-dims", type=int, nargs="+", default=[16, 64, 256])
    p.add_argument("--threads", type=int, nargs="+", default=[1, 2, 4])
    p.add_argument("--repeats", type=int, default=5)

    p = add("synth", cmd_synth, "write a synthetic block-model graph to files")
    for flag, typ, default in (("--nodes", int, 1000), ("--blocks", int, 4), ("--feat-dim", int, 32),
                               ("--p-in", float, 0.02), ("--p-out", float, 0.002),
                               ("--noise", float, 1.0), ("--graph-seed", int, 0)):
        p.add_argument(flag, type=typ, default=default)
    p.add_argument("--binary", action="store_true", help="write binary CSR instead of text")
    p.set_defaults(out=None)
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.config:
            if not Path(args.config).exists():
                raise UsageError(f"config file not found: {args.config}")
            sub = parser._subparsers._group_actions[0].choices[args.command]
            _apply_config(sub, read_config(args.config))
            args = parser.parse_args(argv)
        if args.command == "synth" and not args.out:
            raise UsageError("synth needs --out")
        return args.func(args)
    except (UsageError, FileNotFoundError, GraphFormatError) as exc:
        print(f"hybridgcn {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, TransportError, RuntimeError, ValueError) as exc:
        print(f"hybridgcn {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
