"""Rank-local training state: one worker owns one subgraph and one endpoint.

Boundary exchange for the pair ``j -> i`` ships, in this order, the raw
rows of ``post_sends`` and one partial sum per pre-aggregated destination.
The backward pass runs the same schedule transposed: the receiver sends
gradients of the rows it got, and the sender scatters them back onto the
rows that produced them.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..graph import CsrGraph, Subgraph
from ..kernels import SpmmOperator, build_plan, index_add_opt
from ..plan import CommPlan
from ..quant import RAW_FP32, RAW_FP64, decode_rows, derive_seed, encode_rows
from ..transport import Direction, Transport
from . import model as M


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"loss became {loss} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


@dataclass
class _SendSpec:
    peer: int
    post_local: np.ndarray      # local rows shipped as-is
    pre_src_local: np.ndarray   # local rows folded into partial sums
    pre_slot: np.ndarray        # partial-sum slot of each pre_src_local row
    num_pre: int
    row_keys: np.ndarray


@dataclass
class _RecvSpec:
    peer: int
    num_post: int
    post_row: np.ndarray        # payload row feeding each post edge
    post_dst_local: np.ndarray  # local destination of each post edge
    pre_dst_local: np.ndarray   # local destination of each partial sum
    row_keys: np.ndarray


class _Scatter:
    """``index_add`` with a cached plan per feature width."""

    def __init__(self, idx, num_threads):
        self.idx = np.asarray(idx, dtype=np.int64)
        self.num_threads = num_threads
        self._plans = {}

    def __call__(self, dst, src):
        f = src.shape[1]
        if f not in self._plans:
            self._plans[f] = build_plan(self.idx, f, self.num_threads, exact=True)
        return index_add_opt(dst, src, self._plans[f])


class Worker:
    def __init__(self, rank: int, graph: CsrGraph, subs: list[Subgraph], plan: CommPlan,
                 config: M.TrainConfig, transport: Transport):
        if plan.num_parts != len(subs):
            raise ValueError(f"plan covers {plan.num_parts} parts, partition has {len(subs)}")
        if transport.world_size != len(subs):
            raise ValueError("transport world size does not match the partition")
        self.rank = rank
        self.config = config
        self.transport = transport
        self.graph = graph
        sub = subs[rank]
        self.sub = sub
        dt = config.np_dtype
        self.dtype = dt
        self.n = sub.inner_nodes.size
        self.x = graph.features[sub.inner_nodes].astype(dt)
        self.labels = graph.labels[sub.inner_nodes]
        self.masks = {k: getattr(graph, f"{k}_mask")[sub.inner_nodes] for k in ("train", "val", "test")}
        self.num_classes = graph.num_classes
        deg = graph.in_degree()[sub.inner_nodes].astype(np.float64)
        self.inv_deg = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0).astype(dt)[:, None]
        threads = config.kernel_threads

        lc = sub.local_csr
        self.fwd = SpmmOperator(lc.row_offsets, lc.col_indices, self.n, threads)
        src, dst = lc.edges()
        order = np.argsort(src, kind="stable")
        t_offsets = np.r_[0, np.cumsum(np.bincount(src, minlength=self.n))]
        self.bwd = SpmmOperator(t_offsets, dst[order], self.n, threads)

        nglob = graph.num_nodes
        self.sends: list[_SendSpec] = []
        self.recvs: list[_RecvSpec] = []
        for (j, i), pp in sorted(plan.pairs.items()):
            keys = np.concatenate([pp.post_sends, nglob + pp.pre_dsts])
            if j == rank:
                dsts = pp.pre_dsts
                groups = [pp.pre_groups[int(d)] for d in dsts]
                pre_src = np.concatenate(groups) if groups else np.empty(0, np.int64)
                slots = np.repeat(np.arange(len(groups)), [g.size for g in groups])
                self.sends.append(_SendSpec(i, sub.to_local(pp.post_sends), sub.to_local(pre_src),
                                            slots.astype(np.int64), len(groups), keys))
            elif i == rank:
                ps, pd = pp.post_edges
                self.recvs.append(_RecvSpec(j, pp.post_sends.size,
                                            np.searchsorted(pp.post_sends, ps), sub.to_local(pd),
                                            sub.to_local(pp.pre_dsts), keys))
        self._scatters: dict = {}
        self._pool = ThreadPoolExecutor(max_workers=1, thread_name_prefix=f"xchg{rank}")
        self.names = M.param_names(config)

    # ------------------------------------------------------------------
    # exchange
    # ------------------------------------------------------------------

    def _scatter(self, key, idx):
        if key not in self._scatters:
            self._scatters[key] = _Scatter(idx, self.config.kernel_threads)
        return self._scatters[key]

    def _wire_bits(self, quantize: bool):
        if quantize:
            return self.config.bits
        return RAW_FP64 if self.dtype == np.float64 else RAW_FP32

    def _exchange(self, rows: dict[int, np.ndarray], keys: dict[int, np.ndarray],
                  epoch: int, layer: int, direction: int, quantize: bool) -> dict[int, np.ndarray]:
        bits = self._wire_bits(quantize)
        out = {}
        for peer, table in rows.items():
            seed = derive_seed(self.config.stream_seed, epoch, layer, direction, self.rank, peer)
            out[peer] = encode_rows(table, bits, seed=seed, row_keys=keys[peer])
        got = self.transport.all_to_allv(out, epoch=epoch, layer=layer, direction=direction)
        return {p: decode_rows(buf, self.dtype) for p, buf in got.items() if buf}

    def aggregate(self, hn, epoch: int, layer: int, direction: int, quantize: bool):
        """Neighbour sum (or mean) over the full graph for this worker's nodes."""
        f = hn.shape[1]
        rows, keys = {}, {}
        for s in self.sends:
            partial = self._scatter(("pre", s.peer), s.pre_slot)(
                np.zeros((s.num_pre, f), hn.dtype), hn[s.pre_src_local])
            rows[s.peer] = np.concatenate([hn[s.post_local], partial])
            keys[s.peer] = s.row_keys
        pending = self._pool.submit(self._exchange, rows, keys, epoch, layer, direction, quantize)
        z = self.fwd(hn, "sum")
        got = pending.result()
        for r in self.recvs:
            payload = got[r.peer]
            z = self._scatter(("post", r.peer), r.post_dst_local)(z, payload[r.post_row])
            z = self._scatter(("pdst", r.peer), r.pre_dst_local)(z, payload[r.num_post:])
        if self.config.aggregation == "mean":
            z *= self.inv_deg
        return z

    def aggregate_transpose(self, dz, epoch: int, layer: int, quantize: bool):
        """Adjoint of :meth:`aggregate`: maps dL/dz to dL/dhn."""
        if self.config.aggregation == "mean":
            dz = dz * self.inv_deg
        f = dz.shape[1]
        rows, keys = {}, {}
        for r in self.recvs:
            post = self._scatter(("tpost", r.peer), r.post_row)(
                np.zeros((r.num_post, f), dz.dtype), dz[r.post_dst_local])
            rows[r.peer] = np.concatenate([post, dz[r.pre_dst_local]])
            keys[r.peer] = r.row_keys
        pending = self._pool.submit(self._exchange, rows, keys, epoch, layer,
                                    Direction.BACKWARD, quantize)
        dh = self.bwd(dz, "sum")
        got = pending.result()
        for s in self.sends:
            payload = got[s.peer]
            n_post = s.post_local.size
            dh = self._scatter(("tsend", s.peer), s.post_local)(dh, payload[:n_post])
            dh = self._scatter(("tpre", s.peer), s.pre_src_local)(dh, payload[n_post:][s.pre_slot])
        return dh

    def allreduce(self, vec: np.ndarray, epoch: int, direction=Direction.SYNC) -> np.ndarray:
        """Sum ``vec`` over all ranks, accumulated in rank order on every rank."""
        vec = np.asarray(vec, dtype=np.float64)
        world = self.transport.world_size
        if world == 1:
            return vec.copy()
        bits = self._wire_bits(False)
        buf = encode_rows(vec[None, :], bits)
        got = self.transport.all_to_allv({p: buf for p in range(world) if p != self.rank},
                                         epoch=epoch, direction=direction)
        total = np.zeros_like(vec)
        for p in range(world):
            part = vec if p == self.rank else decode_rows(got[p], np.float64)[0]
            total += part
        return total

    # ------------------------------------------------------------------
    # model
    # ------------------------------------------------------------------

    def input_features(self, params, selected_local) -> np.ndarray:
        if not self.config.label_prop or selected_local is None:
            return self.x
        return M.label_propagate_setup(self.x, self.labels, selected_local, params["embed"])

    def forward(self, params, x0, epoch: int, direction=Direction.FORWARD, quantize=False):
        cfg = self.config
        h = x0
        caches = []
        for l in range(cfg.num_layers):
            if h.shape[1] != (params[f"l{l}.w_self"] if cfg.model == "sage" else params[f"l{l}.w"]).shape[0]:
                raise ValueError(f"layer {l}: input width {h.shape[1]} does not match weights")
            if cfg.norm:
                hn, ln = M.layer_norm_forward(h, params[f"l{l}.norm_gain"],
                                              params[f"l{l}.norm_shift"], cfg.norm_eps)
            else:
                hn, ln = h, None
            z = self.aggregate(hn, epoch, l, direction, quantize)
            if cfg.model == "sage":
                pre = hn @ params[f"l{l}.w_self"] + z @ params[f"l{l}.w_neigh"]
            else:
                pre = z @ params[f"l{l}.w"]
            if cfg.bias:
                pre = pre + params[f"l{l}.bias"]
            last = l == cfg.num_layers - 1
            h = np.maximum(pre, 0) if (cfg.activation == "relu" and not last) else pre
            caches.append((hn, ln, z, pre))
        return h, caches

    def backward(self, params, caches, dlogits, epoch: int, selected_local=None, quantize=False):
        if caches is None or len(caches) != self.config.num_layers:
            raise ValueError("backward needs the caches of a completed forward pass")
        cfg = self.config
        grads = {}
        d = dlogits
        for l in reversed(range(cfg.num_layers)):
            hn, ln, z, pre = caches[l]
            if cfg.activation == "relu" and l != cfg.num_layers - 1:
                d = d * (pre > 0)
            if cfg.bias:
                grads[f"l{l}.bias"] = d.sum(axis=0)
            if cfg.model == "sage":
                grads[f"l{l}.w_self"] = hn.T @ d
                grads[f"l{l}.w_neigh"] = z.T @ d
                dhn = d @ params[f"l{l}.w_self"].T
                dz = d @ params[f"l{l}.w_neigh"].T
            else:
                grads[f"l{l}.w"] = z.T @ d
                dhn = 0
                dz = d @ params[f"l{l}.w"].T
            if l == 0 and not cfg.norm and not cfg.label_prop:
                break  # nothing below the first layer needs a gradient
            dhn = dhn + self.aggregate_transpose(dz, epoch, l, quantize)
            if cfg.norm:
                d, dg, ds = M.layer_norm_backward(dhn, params[f"l{l}.norm_gain"], ln)
                grads[f"l{l}.norm_gain"], grads[f"l{l}.norm_shift"] = dg, ds
            else:
                d = dhn
        if cfg.label_prop:
            sel = selected_local if selected_local is not None else np.zeros(self.n, bool)
            y = M.one_hot(np.where(sel, self.labels, -1), self.num_classes, self.dtype)
            grads["embed"] = y.T @ d
        return {k: np.asarray(grads[k], dtype=self.dtype) for k in self.names}

    # ------------------------------------------------------------------
    # training
    # ------------------------------------------------------------------

    def _selection(self, epoch: int):
        g = self.graph
        if not self.config.label_prop:
            return None, g.train_mask & (g.labels >= 0)
        sel = M.select_label_nodes(g.train_mask, g.labels, self.config.label_rate,
                                   self.config.seed, epoch)
        return sel, g.train_mask & (g.labels >= 0) & ~sel

    def loss_and_grads(self, params, epoch: int):
        """Globally reduced loss and gradients for one epoch's label selection."""
        cfg = self.config
        sel_global, loss_global = self._selection(epoch)
        count = int(loss_global.sum())
        if count == 0:
            raise ValueError("no labelled training nodes left for the loss")
        inner = self.sub.inner_nodes
        sel = None if sel_global is None else sel_global[inner]
        quant = cfg.bits is not None
        x0 = self.input_features(params, sel)
        logits, caches = self.forward(params, x0, epoch, Direction.FORWARD,
                                      quant and cfg.quantize_forward)
        loss, dlogits = M.cross_entropy(logits, self.labels, loss_global[inner], denom=count)
        grads = self.backward(params, caches, dlogits, epoch, sel, quant and cfg.quantize_backward)
        flat = np.append(M.flatten(grads, self.names).astype(np.float64), loss)
        total = self.allreduce(flat, epoch)
        return float(total[-1]), M.unflatten(total[:-1], params, self.names)

    def logits(self, params, epoch: int = 0, inject_train_labels: bool = True):
        """Full-precision forward; training labels injected when label propagation is on."""
        g = self.graph
        sel = None
        if self.config.label_prop and inject_train_labels:
            sel = (g.train_mask & (g.labels >= 0))[self.sub.inner_nodes]
        elif self.config.label_prop:
            sel = np.zeros(self.n, bool)
        out, _ = self.forward(params, self.input_features(params, sel), epoch, Direction.EVAL, False)
        return out

    def evaluate(self, params, epoch: int, extra=()) -> dict[str, float]:
        pred = self.logits(params, epoch).argmax(axis=1)
        ok = (pred == self.labels) & (self.labels >= 0)
        counts = []
        for k in ("train", "val", "test"):
            m = self.masks[k] & (self.labels >= 0)
            counts += [float((ok & m).sum()), float(m.sum())]
        total = self.allreduce(np.array(counts + list(extra), dtype=np.float64), epoch)
        out = {}
        for n, k in enumerate(("train", "val", "test")):
            hit, tot = total[2 * n], total[2 * n + 1]
            out[f"{k}_acc"] = hit / tot if tot else float("nan")
        out["extra"] = total[6:]
        return out

    def boundary_bytes(self, epoch: int) -> int:
        tot = self.transport.ledger.totals("sent", epoch, (Direction.FORWARD, Direction.BACKWARD))
        return sum(c.total for (s, _), c in tot.items() if s == self.rank)

    def train(self, params, callback=None) -> list[dict]:
        cfg = self.config
        opt = M.make_optimizer(cfg)
        history = []
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            loss, grads = self.loss_and_grads(params, epoch)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDiverged(epoch, loss)
            opt.step(params, grads)
            wall = (time.perf_counter() - t0) * 1e3
            # wall time stays local so every byte on the wire is reproducible
            ev = self.evaluate(params, epoch, extra=(self.boundary_bytes(epoch),))
            row = {"epoch": epoch, "loss": loss, "train_acc": ev["train_acc"],
                   "val_acc": ev["val_acc"], "test_acc": ev["test_acc"],
                   "bytes_sent": int(ev["extra"][0]), "wall_ms": wall}
            history.append(row)
            if callback is not None and self.rank == 0:
                callback(row)
        return history

    def close(self):
        self._pool.shutdown(wait=False)
