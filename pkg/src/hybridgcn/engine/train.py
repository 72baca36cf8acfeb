"""Drive P workers over one graph: in-process threads or TCP endpoints."""

from __future__ import annotations

import csv
import threading
from dataclasses import dataclass, field

import numpy as np

from ..graph import CsrGraph, Partition, build_subgraphs, partition_weighted
from ..plan import CommPlan, plan_all
from ..transport import (ByteLedger, InProcHub, TcpTransport, TransportError,
                         free_local_hosts)
from . import model as M
from .worker import Worker

METRIC_COLUMNS = ("epoch", "loss", "train_acc", "val_acc", "test_acc", "bytes_sent", "wall_ms")


@dataclass
class Setup:
    partition: Partition
    subgraphs: list
    plan: CommPlan


@dataclass
class TrainResult:
    history: list[dict]
    params: dict[str, np.ndarray]
    ledger: ByteLedger
    setup: Setup
    config: M.TrainConfig = field(repr=False, default=None)

    @property
    def final(self) -> dict:
        return self.history[-1] if self.history else {}


def prepare(graph: CsrGraph, config: M.TrainConfig, partition: Partition | None = None,
            plan: CommPlan | None = None) -> Setup:
    if graph.num_classes < 1:
        raise ValueError("graph has no labels")
    if partition is None:
        partition = partition_weighted(graph, config.num_workers, "indegree-plus-trainmask",
                                       seed=config.seed)
    if partition.num_parts != config.num_workers:
        raise ValueError(f"partition has {partition.num_parts} parts, "
                         f"config asks for {config.num_workers} workers")
    subs = build_subgraphs(graph, partition)
    if plan is None:
        plan = plan_all(subs)
    elif plan.num_parts != partition.num_parts:
        raise ValueError("communication plan does not match the partition")
    return Setup(partition, subs, plan)


def _endpoints(config: M.TrainConfig):
    p = config.num_workers
    if config.backend == "inproc":
        hub = InProcHub(p, config.timeout)
        return hub.endpoints(), hub.ledger, hub
    ledger = ByteLedger()
    hosts = free_local_hosts(p)
    return [TcpTransport(r, hosts, config.timeout, ledger) for r in range(p)], ledger, None


def run_workers(graph: CsrGraph, config: M.TrainConfig, fn, setup: Setup | None = None):
    """Run ``fn(worker)`` on every rank concurrently; return per-rank results and the ledger."""
    setup = setup or prepare(graph, config)
    transports, ledger, hub = _endpoints(config)
    results = [None] * config.num_workers
    errors: list[tuple[int, BaseException]] = []

    def body(rank):
        worker = None
        try:
            worker = Worker(rank, graph, setup.subgraphs, setup.plan, config, transports[rank])
            results[rank] = fn(worker)
        except BaseException as exc:  # noqa: BLE001 - re-raised on the caller's thread
            errors.append((rank, exc))
            if hub is not None:
                hub.barrier.abort()
        finally:
            if worker is not None:
                worker.close()

    if config.num_workers == 1:
        body(0)
    else:
        threads = [threading.Thread(target=body, args=(r,), daemon=True)
                   for r in range(config.num_workers)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    for t in transports:
        t.close()
    if errors:
        # report the root cause rather than peers that timed out waiting for it
        errors.sort(key=lambda e: (isinstance(e[1], TransportError), e[0]))
        raise errors[0][1]
    return results, ledger


def train(graph: CsrGraph, config: M.TrainConfig, partition: Partition | None = None,
          plan: CommPlan | None = None, params: dict | None = None, callback=None) -> TrainResult:
    """Full-batch training; every rank holds identical weights after each step."""
    setup = prepare(graph, config, partition, plan)
    init = params if params is not None else M.init_params(config, graph.feat_dim, graph.num_classes)
    holders = {}

    def fn(worker):
        local = {k: v.astype(config.np_dtype, copy=True) for k, v in init.items()}
        hist = worker.train(local, callback)
        holders[worker.rank] = local
        return hist

    results, ledger = run_workers(graph, config, fn, setup)
    return TrainResult(results[0], holders[0], ledger, setup, config)


def train_rank(graph: CsrGraph, config: M.TrainConfig, rank: int, hosts, setup: Setup | None = None,
               params: dict | None = None, callback=None) -> TrainResult:
    """Train as one process of a multi-process TCP job; every rank runs this."""
    if len(hosts) != config.num_workers:
        raise ValueError(f"hosts file lists {len(hosts)} ranks, config asks for {config.num_workers}")
    if not 0 <= rank < config.num_workers:
        raise ValueError(f"rank {rank} outside [0, {config.num_workers})")
    setup = setup or prepare(graph, config)
    init = params if params is not None else M.init_params(config, graph.feat_dim, graph.num_classes)
    local = {k: v.astype(config.np_dtype, copy=True) for k, v in init.items()}
    transport = TcpTransport(rank, hosts, config.timeout)
    worker = Worker(rank, graph, setup.subgraphs, setup.plan, config, transport)
    try:
        hist = worker.train(local, callback)
    finally:
        worker.close()
        transport.close()
    return TrainResult(hist, local, transport.ledger, setup, config)


def compute_logits(graph: CsrGraph, params, config: M.TrainConfig, setup: Setup | None = None,
                   inject_train_labels: bool = True) -> np.ndarray:
    """Global logits assembled from all ranks (full-precision exchange)."""
    setup = setup or prepare(graph, config)
    out = np.zeros((graph.num_nodes, params[M.param_names(config)[-1]].shape[-1]), config.np_dtype)

    def fn(worker):
        return worker.sub.inner_nodes, worker.logits(params, 0, inject_train_labels)

    results, _ = run_workers(graph, config, fn, setup)
    for nodes, logits in results:
        out[nodes] = logits
    return out


def loss_and_grads(graph: CsrGraph, params, config: M.TrainConfig, setup: Setup | None = None,
                   epoch: int = 0):
    """One distributed forward/backward without an optimizer step."""
    setup = setup or prepare(graph, config)
    results, ledger = run_workers(graph, config, lambda w: w.loss_and_grads(params, epoch), setup)
    return results[0]


def write_metrics(history: list[dict], path, summary: dict | None = None) -> None:
    """Per-epoch CSV with a header; an optional trailing ``#`` summary line."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for row in history:
            w.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
        if summary:
            fh.write("# " + " ".join(f"{k}={_fmt(v)}" for k, v in summary.items()) + "\n")


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    return [{k: (int(v) if k in ("epoch", "bytes_sent") else float(v)) for k, v in r.items()}
            for r in rows]


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)
