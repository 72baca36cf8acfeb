"""Neighbour aggregation primitives: ``index_add`` and SpMM.

The optimized path follows three steps:

1. stable-sort ``idx`` and cluster the ``src`` rows that land on the same
   ``dst`` row;
2. reorder the loop so one accumulator per cluster is carried across all of
   the cluster's rows (clusters are visited longest-first, so at depth ``k``
   the still-active clusters form a prefix);
3. walk the feature axis in column tiles of ``tile`` elements.

Work is split over a 2-D grid of row ranges x column blocks with equal
FLOPs per row range. Row ranges may cut a large cluster; the pieces then
keep private accumulators that are folded into ``dst`` in range order.
With ``exact=True`` ranges only break at cluster boundaries and every dst row
is accumulated in the original ``idx`` order, which makes the result
bit-identical to the naive loop.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

DEFAULT_TILE = 16
_POOL: ThreadPoolExecutor | None = None


def _pool(n: int) -> ThreadPoolExecutor:
    global _POOL
    if _POOL is None or _POOL._max_workers < n:
        _POOL = ThreadPoolExecutor(max_workers=max(n, os.cpu_count() or 1),
                                   thread_name_prefix="aggr")
    return _POOL


def _check(dst, src, idx):
    if src.ndim != 2 or dst.ndim != 2:
        raise ValueError("dst and src must be 2-D")
    if idx.shape != (src.shape[0],):
        raise ValueError(f"idx has {idx.shape} entries, src has {src.shape[0]} rows")
    if dst.shape[1] != src.shape[1]:
        raise ValueError("dst and src feature widths differ")
    if idx.size and (idx.min() < 0 or idx.max() >= dst.shape[0]):
        raise IndexError("idx out of range for dst")


def index_add_naive(dst: np.ndarray, src: np.ndarray, idx) -> np.ndarray:
    """Reference semantics: ``dst[idx[k]] += src[k]`` for k in order."""
    idx = np.asarray(idx, dtype=np.int64)
    out = np.array(dst, copy=True)
    _check(out, src, idx)
    np.add.at(out, idx, src.astype(out.dtype, copy=False))
    return out


@dataclass
class GatherScatterPlan:
    sorted_idx: np.ndarray       # idx[perm]
    perm: np.ndarray             # src row order after the stable sort
    cluster_offsets: np.ndarray  # boundaries of equal-dst runs in sorted order
    thread_rows: list[tuple[int, int]]    # sorted-row ranges, one per row thread
    col_blocks: list[tuple[int, int]]     # column ranges, one per column thread
    feat_dim: int
    tile: int
    exact: bool

    @property
    def num_clusters(self) -> int:
        return int(self.cluster_offsets.size - 1)

    @property
    def cluster_dst(self) -> np.ndarray:
        return self.sorted_idx[self.cluster_offsets[:-1]]

    def row_flops(self) -> np.ndarray:
        return np.array([(hi - lo) * self.feat_dim for lo, hi in self.thread_rows], dtype=float)


def _balanced_ranges(n: int, parts: int, cut_points: np.ndarray | None) -> list[tuple[int, int]]:
    """Split [0, n) into ``parts`` ranges of near-equal length.

    If ``cut_points`` is given, boundaries snap to the nearest allowed cut.
    """
    bounds = [round(k * n / parts) for k in range(parts + 1)]
    if cut_points is not None and cut_points.size:
        snapped = [0]
        for b in bounds[1:-1]:
            pos = np.searchsorted(cut_points, b)
            cands = cut_points[max(pos - 1, 0):pos + 1]
            snapped.append(int(cands[np.argmin(np.abs(cands - b))]))
        snapped.append(n)
        bounds = sorted(set(snapped))
    return [(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]


def build_plan(idx, feat_dim: int, num_threads: int = 1, tile: int = DEFAULT_TILE,
               exact: bool = False, min_rows_per_thread: int = 8) -> GatherScatterPlan:
    """Sort/cluster ``idx`` and lay out the 2-D thread grid.

    Column splitting kicks in when there are fewer clusters than four times
    the thread count; columns are then divided into whole tiles.
    """
    idx = np.asarray(idx, dtype=np.int64)
    perm = np.argsort(idx, kind="stable")
    sidx = idx[perm]
    n = sidx.size
    starts = np.flatnonzero(np.r_[True, sidx[1:] != sidx[:-1]]) if n else np.empty(0, np.int64)
    offsets = np.r_[starts, n].astype(np.int64)
    num_threads = max(1, int(num_threads))
    num_clusters = offsets.size - 1

    col_threads = 1
    if num_clusters < 4 * num_threads and num_threads > 1:
        col_threads = min(num_threads, max(1, -(-feat_dim // tile)))
    row_threads = max(1, num_threads // col_threads)
    row_threads = min(row_threads, max(1, n // min_rows_per_thread))

    thread_rows = _balanced_ranges(n, row_threads, offsets if exact else None) if n else []
    ntiles = -(-feat_dim // tile) if feat_dim else 0
    tile_bounds = [round(k * ntiles / col_threads) * tile for k in range(col_threads + 1)]
    col_blocks = [(lo, min(hi, feat_dim)) for lo, hi in zip(tile_bounds[:-1], tile_bounds[1:])
                  if min(hi, feat_dim) > lo]
    return GatherScatterPlan(sidx, perm, offsets, thread_rows, col_blocks or [(0, feat_dim)],
                             feat_dim, tile, exact)


def _range_kernel(dst, src_sorted, starts, ends, seed_rows, c0, c1, tile):
    """Accumulate clusters ``[starts[k], ends[k])`` over columns [c0, c1).

    ``seed_rows[k]`` is the dst row that initialises accumulator k, or -1
    for a zero start. Returns the accumulator block.
    """
    lengths = ends - starts
    order = np.argsort(-lengths, kind="stable")
    starts, lengths, seed_rows = starts[order], lengths[order], seed_rows[order]
    acc = np.zeros((starts.size, c1 - c0), dtype=dst.dtype)
    seeded = seed_rows >= 0
    acc[seeded] = dst[seed_rows[seeded], c0:c1]
    max_len = int(lengths[0]) if lengths.size else 0
    # number of clusters still active at each depth (lengths sorted descending)
    active = np.searchsorted(-lengths, -np.arange(1, max_len + 1), side="right")
    for t0 in range(c0, c1, tile):
        t1 = min(t0 + tile, c1)
        a = acc[:, t0 - c0:t1 - c0]
        for depth in range(max_len):
            k = active[depth]
            a[:k] += src_sorted[starts[:k] + depth, t0:t1]
    out = np.empty_like(acc)
    out[order] = acc
    return out


def index_add_opt(dst: np.ndarray, src: np.ndarray, plan: GatherScatterPlan,
                  idx=None) -> np.ndarray:
    """Optimized ``index_add`` driven by a prebuilt plan; returns a new array."""
    if src.ndim != 2 or src.shape[0] != plan.perm.size or src.shape[1] != plan.feat_dim:
        raise ValueError("plan does not match src shape")
    if dst.ndim != 2 or dst.shape[1] != plan.feat_dim:
        raise ValueError("plan does not match dst shape")
    if plan.sorted_idx.size and plan.sorted_idx[-1] >= dst.shape[0]:
        raise IndexError("idx out of range for dst")
    out = np.array(dst, copy=True)
    if src.shape[0] == 0 or plan.feat_dim == 0:
        return out
    src_sorted = src[plan.perm].astype(out.dtype, copy=False)
    offsets = plan.cluster_offsets
    cdst = plan.cluster_dst

    jobs = []
    for lo, hi in plan.thread_rows:
        c_first = int(np.searchsorted(offsets, lo, side="right") - 1)
        c_last = int(np.searchsorted(offsets, hi, side="left"))
        starts = np.maximum(offsets[c_first:c_last], lo)
        ends = np.minimum(offsets[c_first + 1:c_last + 1], hi)
        owns_first = offsets[c_first:c_last] >= lo
        seed_rows = np.where(owns_first, cdst[c_first:c_last], -1)
        for c0, c1 in plan.col_blocks:
            jobs.append((c_first, c_last, owns_first, c0, c1, starts, ends, seed_rows))

    def run(job):
        c_first, c_last, owns_first, c0, c1, starts, ends, seed_rows = job
        return _range_kernel(out, src_sorted, starts, ends, seed_rows, c0, c1, plan.tile)

    if len(jobs) > 1:
        results = list(_pool(len(jobs)).map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    # seeded pieces overwrite their dst row; continuation pieces add on top, in range order
    for job, acc in zip(jobs, results):
        c_first, c_last, owns_first, c0, c1 = job[:5]
        rows = cdst[c_first:c_last]
        out[rows[owns_first], c0:c1] = acc[owns_first]
        if not owns_first.all():
            out[rows[~owns_first], c0:c1] += acc[~owns_first]
    return out


def index_add(dst, src, idx, num_threads: int = 1, tile: int = DEFAULT_TILE, exact: bool = True):
    idx = np.asarray(idx, dtype=np.int64)
    _check(dst, src, idx)
    return index_add_opt(dst, src, build_plan(idx, src.shape[1], num_threads, tile, exact))


class SpmmOperator:
    """Reusable SpMM for one adjacency: caches the gather/scatter plan.

    ``out[v] = sum_{u in N(v)} dense[u]`` (``mode='sum'``) or the mean over
    ``N(v)``, with isolated rows left at zero.
    """

    def __init__(self, row_offsets, col_indices, num_rows: int, num_threads: int = 1,
                 tile: int = DEFAULT_TILE, exact: bool = True):
        self.row_offsets = np.asarray(row_offsets, dtype=np.int64)
        self.col_indices = np.asarray(col_indices, dtype=np.int64)
        self.num_rows = num_rows
        self.edge_dst = np.repeat(np.arange(num_rows, dtype=np.int64), np.diff(self.row_offsets))
        self.num_threads, self.tile, self.exact = num_threads, tile, exact
        self._plans: dict[int, GatherScatterPlan] = {}
        deg = np.diff(self.row_offsets).astype(np.float64)
        self.inv_degree = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)

    def _plan(self, f: int) -> GatherScatterPlan:
        if f not in self._plans:
            self._plans[f] = build_plan(self.edge_dst, f, self.num_threads, self.tile, self.exact)
        return self._plans[f]

    def __call__(self, dense: np.ndarray, mode: str = "sum") -> np.ndarray:
        if mode not in ("sum", "mean"):
            raise ValueError(f"unknown aggregation mode {mode!r}")
        out = np.zeros((self.num_rows, dense.shape[1]), dtype=dense.dtype)
        if self.col_indices.size:
            out = index_add_opt(out, dense[self.col_indices], self._plan(dense.shape[1]))
        if mode == "mean":
            out *= self.inv_degree.astype(out.dtype)[:, None]
        return out


def spmm(csr, dense: np.ndarray, mode: str = "sum", num_threads: int = 1,
         tile: int = DEFAULT_TILE, exact: bool = True) -> np.ndarray:
    """Aggregate ``dense`` rows over the neighbourhoods of a CSR graph."""
    if dense.ndim != 2 or dense.shape[0] != csr.num_nodes:
        raise ValueError(f"dense has {dense.shape[0]} rows, graph has {csr.num_nodes} nodes")
    op = SpmmOperator(csr.row_offsets, csr.col_indices, csr.num_nodes, num_threads, tile, exact)
    return op(dense, mode)


def spmm_naive(csr, dense: np.ndarray, mode: str = "sum") -> np.ndarray:
    """Row-by-row sequential reference for :func:`spmm`."""
    out = np.zeros((csr.num_nodes, dense.shape[1]), dtype=dense.dtype)
    for v in range(csr.num_nodes):
        nbrs = csr.neighbors(v)
        acc = out[v]
        for u in nbrs:
            acc += dense[u]
        if mode == "mean" and nbrs.size:
            acc *= dense.dtype.type(1.0 / nbrs.size)
    return out
