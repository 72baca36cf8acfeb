"""Graph storage, IO, weighted partitioning and per-worker subgraphs.

Adjacency is stored row-wise by *destination*: row ``v`` of the CSR lists
the neighbours ``u`` whose features ``v`` aggregates, i.e. the message
edges ``u -> v``.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BINARY_MAGIC = b"MGCN"
BINARY_VERSION = 1
_HEADER = struct.Struct("<4sIQQI")
_LABEL_MAGIC = b"LBLS"


class GraphFormatError(ValueError):
    """Raised when a graph, sidecar or partition file cannot be parsed."""


@dataclass
class CsrGraph:
    num_nodes: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    features: np.ndarray | None = None
    labels: np.ndarray | None = None
    train_mask: np.ndarray | None = None
    val_mask: np.ndarray | None = None
    test_mask: np.ndarray | None = None

    def __post_init__(self):
        self.row_offsets = np.asarray(self.row_offsets, dtype=np.int64)
        self.col_indices = np.asarray(self.col_indices, dtype=np.int64)
        n = self.num_nodes
        if self.features is None:
            self.features = np.zeros((n, 0), dtype=np.float32)
        if self.labels is None:
            self.labels = np.full(n, -1, dtype=np.int64)
        for name in ("train_mask", "val_mask", "test_mask"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(n, dtype=bool))

    @property
    def num_edges(self) -> int:
        return int(self.col_indices.shape[0])

    @property
    def feat_dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def num_classes(self) -> int:
        labelled = self.labels[self.labels >= 0]
        return int(labelled.max()) + 1 if labelled.size else 0

    def in_degree(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    def neighbors(self, v: int) -> np.ndarray:
        return self.col_indices[self.row_offsets[v]:self.row_offsets[v + 1]]

    def edge_dst(self) -> np.ndarray:
        """Destination node of every stored edge, aligned with ``col_indices``."""
        return np.repeat(np.arange(self.num_nodes, dtype=np.int64), self.in_degree())

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(src, dst)`` arrays of the message edges."""
        return self.col_indices.copy(), self.edge_dst()

    def validate(self) -> None:
        ro, ci = self.row_offsets, self.col_indices
        if ro.shape != (self.num_nodes + 1,):
            raise GraphFormatError("row_offsets must have num_nodes+1 entries")
        if ro[0] != 0 or ro[-1] != ci.shape[0] or np.any(np.diff(ro) < 0):
            raise GraphFormatError("row_offsets not a valid prefix array")
        if ci.size and (ci.min() < 0 or ci.max() >= self.num_nodes):
            raise GraphFormatError("column index out of range")
        dst = self.edge_dst()
        same_row = dst[1:] == dst[:-1]
        if np.any(ci[1:][same_row] <= ci[:-1][same_row]):
            raise GraphFormatError("rows must be strictly increasing")

    def equals(self, other: "CsrGraph") -> bool:
        return (
            self.num_nodes == other.num_nodes
            and np.array_equal(self.row_offsets, other.row_offsets)
            and np.array_equal(self.col_indices, other.col_indices)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.train_mask, other.train_mask)
            and np.array_equal(self.val_mask, other.val_mask)
            and np.array_equal(self.test_mask, other.test_mask)
        )

    def dense_adjacency(self, dtype=np.float64) -> np.ndarray:
        """``A[v, u] = 1`` for every edge ``u -> v``; only for small graphs."""
        a = np.zeros((self.num_nodes, self.num_nodes), dtype=dtype)
        a[self.edge_dst(), self.col_indices] = 1
        return a


def from_edges(num_nodes: int, src, dst, symmetrize: bool = False,
               drop_self_loops: bool = True, **node_data) -> CsrGraph:
    """Build a canonical CSR graph (sorted, deduplicated rows) from edge arrays."""
    src = np.asarray(src, dtype=np.int64).ravel()
    dst = np.asarray(dst, dtype=np.int64).ravel()
    if src.shape != dst.shape:
        raise GraphFormatError("src and dst lengths differ")
    if src.size and (min(src.min(), dst.min()) < 0):
        raise GraphFormatError("negative node id")
    if src.size and max(src.max(), dst.max()) >= num_nodes:
        raise GraphFormatError(
            f"node id {max(src.max(), dst.max())} out of range for {num_nodes} nodes")
    if symmetrize:
        src, dst = np.concatenate([src, dst]), np.concatenate([dst, src])
    if drop_self_loops:
        keep = src != dst
        src, dst = src[keep], dst[keep]
    key = np.unique(dst * num_nodes + src)
    dst_s, src_s = np.divmod(key, num_nodes) if num_nodes else (key, key)
    offsets = np.zeros(num_nodes + 1, dtype=np.int64)
    np.add.at(offsets, dst_s + 1, 1)
    np.cumsum(offsets, out=offsets)
    return CsrGraph(num_nodes, offsets, src_s, **node_data)


def _parse_edge_list(path: Path) -> tuple[list[int], list[int]]:
    src, dst = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise GraphFormatError(f"{path}:{lineno}: expected 'src dst', got {line!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise GraphFormatError(f"{path}:{lineno}: non-integer node id") from None
            if u < 0 or v < 0:
                raise GraphFormatError(f"{path}:{lineno}: negative node id (ids must be dense in [0, N))")
            src.append(u)
            dst.append(v)
    return src, dst


def _read_rows(path, ncols_hint=None) -> list[list[str]]:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                rows.append(line.split())
    return rows


def load_sidecars(num_nodes: int, features=None, labels=None, masks=None) -> dict:
    """Read feature / label / mask sidecar text files (one row per node)."""
    out = {}
    if features is not None:
        rows = _read_rows(features)
        if len(rows) != num_nodes:
            raise GraphFormatError(f"{features}: {len(rows)} rows for {num_nodes} nodes")
        try:
            out["features"] = np.array(rows, dtype=np.float32).reshape(num_nodes, -1)
        except ValueError as exc:
            raise GraphFormatError(f"{features}: {exc}") from None
    if labels is not None:
        rows = _read_rows(labels)
        if len(rows) != num_nodes:
            raise GraphFormatError(f"{labels}: {len(rows)} rows for {num_nodes} nodes")
        out["labels"] = np.array([int(r[0]) for r in rows], dtype=np.int64)
    if masks is not None:
        rows = _read_rows(masks)
        if len(rows) != num_nodes or any(len(r) != 3 for r in rows):
            raise GraphFormatError(f"{masks}: expected {num_nodes} rows of 'train val test'")
        m = np.array(rows, dtype=np.int64).astype(bool)
        out["train_mask"], out["val_mask"], out["test_mask"] = m[:, 0], m[:, 1], m[:, 2]
    return out


def load_graph(path, format: str = "edge-list", num_nodes: int | None = None,
               symmetrize: bool = False, features=None, labels=None,
               masks=None) -> CsrGraph:
    """Load a graph from an edge list or the binary CSR format.

    For edge lists the node count defaults to ``max id + 1``; pass
    ``num_nodes`` to declare isolated trailing nodes (and to range-check ids).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    if format == "binary-csr":
        g = load_binary(path)
        if symmetrize:
            src, dst = g.edges()
            g = from_edges(g.num_nodes, src, dst, symmetrize=True,
                           features=g.features, labels=g.labels, train_mask=g.train_mask,
                           val_mask=g.val_mask, test_mask=g.test_mask)
        return g
    if format != "edge-list":
        raise ValueError(f"unknown graph format {format!r}")
    src, dst = _parse_edge_list(path)
    inferred = max(max(src, default=-1), max(dst, default=-1)) + 1
    if num_nodes is None:
        num_nodes = inferred
    elif inferred > num_nodes:
        raise GraphFormatError(f"{path}: node id {inferred - 1} out of range for {num_nodes} nodes")
    side = load_sidecars(num_nodes, features, labels, masks)
    return from_edges(num_nodes, src, dst, symmetrize=symmetrize, **side)


def save_edge_list(g: CsrGraph, path) -> None:
    src, dst = g.edges()
    with open(path, "w") as fh:
        fh.write(f"# nodes: {g.num_nodes}\n")
        for u, v in zip(src.tolist(), dst.tolist()):
            fh.write(f"{u} {v}\n")


def save_sidecars(g: CsrGraph, prefix) -> dict[str, str]:
    prefix = str(prefix)
    paths = {"features": prefix + ".feat", "labels": prefix + ".labels", "masks": prefix + ".masks"}
    np.savetxt(paths["features"], g.features, fmt="%.9g")
    np.savetxt(paths["labels"], g.labels, fmt="%d")
    m = np.stack([g.train_mask, g.val_mask, g.test_mask], axis=1).astype(int)
    np.savetxt(paths["masks"], m, fmt="%d")
    return paths


def save_binary(g: CsrGraph, path) -> None:
    """Little-endian CSR: header, int64 offsets, int64 indices, FP32 features.

    Labels and masks follow in a trailing ``LBLS`` section.
    """
    feats = np.ascontiguousarray(g.features, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(BINARY_MAGIC, BINARY_VERSION, g.num_nodes, g.num_edges, g.feat_dim))
        fh.write(g.row_offsets.astype("<i8").tobytes())
        fh.write(g.col_indices.astype("<i8").tobytes())
        fh.write(feats.tobytes())
        fh.write(_LABEL_MAGIC)
        fh.write(g.labels.astype("<i8").tobytes())
        masks = np.stack([g.train_mask, g.val_mask, g.test_mask]).astype(np.uint8)
        fh.write(masks.tobytes())


def load_binary(path) -> CsrGraph:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise GraphFormatError(f"{path}: truncated header")
    magic, version, n, e, f = _HEADER.unpack_from(buf, 0)
    if magic != BINARY_MAGIC:
        raise GraphFormatError(f"{path}: bad magic {magic!r}")
    if version != BINARY_VERSION:
        raise GraphFormatError(f"{path}: unsupported version {version}")
    pos = _HEADER.size
    need = pos + 8 * (n + 1) + 8 * e + 4 * n * f
    if len(buf) < need:
        raise GraphFormatError(f"{path}: truncated body")
    offsets = np.frombuffer(buf, "<i8", n + 1, pos).astype(np.int64)
    pos += 8 * (n + 1)
    indices = np.frombuffer(buf, "<i8", e, pos).astype(np.int64)
    pos += 8 * e
    feats = np.frombuffer(buf, "<f4", n * f, pos).reshape(n, f).astype(np.float32)
    pos += 4 * n * f
    extra = {}
    if buf[pos:pos + 4] == _LABEL_MAGIC:
        pos += 4
        extra["labels"] = np.frombuffer(buf, "<i8", n, pos).astype(np.int64)
        pos += 8 * n
        m = np.frombuffer(buf, np.uint8, 3 * n, pos).reshape(3, n).astype(bool)
        extra.update(train_mask=m[0].copy(), val_mask=m[1].copy(), test_mask=m[2].copy())
    g = CsrGraph(int(n), offsets, indices, features=feats, **extra)
    g.validate()
    return g


# --------------------------------------------------------------------------
# Partitioning
# --------------------------------------------------------------------------

@dataclass
class Partition:
    num_parts: int
    assignment: np.ndarray
    part_weights: np.ndarray = field(default=None)

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        if self.part_weights is None:
            self.part_weights = np.bincount(self.assignment, minlength=self.num_parts).astype(float)

    @property
    def imbalance(self) -> float:
        mean = self.part_weights.mean()
        return float(self.part_weights.max() / mean) if mean > 0 else 1.0

    def members(self, part: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == part)


def node_weights(g: CsrGraph, weight_mode: str = "uniform", train_weight: float | None = None) -> np.ndarray:
    """Per-node partitioning weight.

    ``indegree-plus-trainmask`` gives ``in_degree + train_weight * train_mask``;
    ``train_weight`` defaults to the average in-degree.
    """
    if weight_mode == "uniform":
        return np.ones(g.num_nodes)
    if weight_mode == "indegree-plus-trainmask":
        deg = g.in_degree().astype(float)
        lam = deg.mean() if train_weight is None else float(train_weight)
        return deg + lam * g.train_mask.astype(float)
    raise ValueError(f"unknown weight mode {weight_mode!r}")


def _undirected_adjacency(g: CsrGraph) -> list[np.ndarray]:
    src, dst = g.edges()
    both = from_edges(g.num_nodes, src, dst, symmetrize=True)
    return [both.neighbors(v) for v in range(g.num_nodes)]


def cut_edges(g: CsrGraph, assignment) -> int:
    assignment = np.asarray(assignment)
    src, dst = g.edges()
    return int(np.count_nonzero(assignment[src] != assignment[dst]))


def _pick_seeds(adj, n, num_parts, rng) -> list[int]:
    seeds = [int(rng.integers(n))]
    dist = np.full(n, np.inf)
    while len(seeds) < num_parts:
        # BFS from the newest seed, keep the min distance to any seed
        d = np.full(n, np.inf)
        d[seeds[-1]] = 0
        q = deque([seeds[-1]])
        while q:
            v = q.popleft()
            for u in adj[v]:
                if d[u] == np.inf:
                    d[u] = d[v] + 1
                    q.append(u)
        dist = np.minimum(dist, d)
        dist[seeds] = -1
        far = np.flatnonzero(dist == dist.max())
        seeds.append(int(far[rng.integers(far.size)]))
    return seeds


def _grow(adj, weights, num_parts, seeds, rng) -> np.ndarray:
    n = len(adj)
    assign = np.full(n, -1, dtype=np.int64)
    load = np.zeros(num_parts)
    frontier = [deque() for _ in range(num_parts)]
    for p, s in enumerate(seeds):
        assign[s] = p
        load[p] += weights[s]
        frontier[p].extend(adj[s])
    remaining = n - num_parts
    order = rng.permutation(n)
    cursor = 0
    while remaining:
        p = int(np.argmin(load))
        v = -1
        while frontier[p]:
            cand = frontier[p].popleft()
            if assign[cand] < 0:
                v = cand
                break
        if v < 0:
            # frontier exhausted (disconnected graph): restart from an unassigned node
            while assign[order[cursor]] >= 0:
                cursor += 1
            v = int(order[cursor])
        assign[v] = p
        load[p] += weights[v]
        frontier[p].extend(adj[v])
        remaining -= 1
    return assign


def _refine(adj, weights, assign, num_parts, max_load, passes) -> None:
    n = len(adj)
    load = np.bincount(assign, weights=weights, minlength=num_parts)
    for _ in range(passes):
        moved = 0
        for v in range(n):
            nbrs = adj[v]
            if nbrs.size == 0:
                continue
            here = assign[v]
            counts = np.bincount(assign[nbrs], minlength=num_parts)
            gains = counts - counts[here]
            gains[here] = 0
            best = -1
            best_key = (0, 0.0)
            for p in np.flatnonzero(gains >= 0):
                if p == here or load[p] + weights[v] > max_load:
                    continue
                # zero-gain moves only when they improve balance
                key = (gains[p], load[here] - load[p] - weights[v])
                if gains[p] == 0 and key[1] <= 0:
                    continue
                if key > best_key:
                    best, best_key = p, key
            if best >= 0:
                assign[v] = best
                load[here] -= weights[v]
                load[best] += weights[v]
                moved += 1
        if not moved:
            break


def _rebalance(adj, weights, assign, num_parts, max_load) -> None:
    load = np.bincount(assign, weights=weights, minlength=num_parts)
    for _ in range(len(adj)):
        heavy = int(np.argmax(load))
        if load[heavy] <= max_load:
            return
        best, best_gain = None, -np.inf
        for v in np.flatnonzero(assign == heavy):
            counts = np.bincount(assign[adj[v]], minlength=num_parts) if adj[v].size else np.zeros(num_parts, int)
            for p in range(num_parts):
                if p == heavy or load[p] + weights[v] > max_load:
                    continue
                gain = counts[p] - counts[heavy]
                if gain > best_gain:
                    best, best_gain = (v, p), gain
        if best is None:
            return
        v, p = best
        assign[v] = p
        load[heavy] -= weights[v]
        load[p] += weights[v]


def partition_weighted(g: CsrGraph, num_parts: int, weight_mode: str = "uniform",
                       seed: int = 0, tolerance: float = 0.05,
                       train_weight: float | None = None, passes: int = 8) -> Partition:
    """Greedy BFS-grow partition followed by cut-reducing boundary refinement.

    Seeds are spread out by BFS distance; parts grow breadth-first, always
    extending the lightest one. Refinement moves boundary nodes to the
    neighbouring part that removes the most cut edges while every part stays
    below ``(1 + tolerance)`` times the mean weight.
    """
    n = g.num_nodes
    if num_parts < 1:
        raise ValueError("num_parts must be >= 1")
    if num_parts > n:
        raise ValueError(f"cannot split {n} nodes into {num_parts} parts")
    weights = node_weights(g, weight_mode, train_weight)
    if num_parts == 1:
        assign = np.zeros(n, dtype=np.int64)
        return Partition(1, assign, np.array([weights.sum()]))
    rng = np.random.default_rng(seed)
    adj = _undirected_adjacency(g)
    seeds = _pick_seeds(adj, n, num_parts, rng)
    assign = _grow(adj, weights, num_parts, seeds, rng)
    max_load = (1.0 + tolerance) * weights.sum() / num_parts
    max_load = max(max_load, weights.max()) if n else max_load
    _rebalance(adj, weights, assign, num_parts, max_load)
    _refine(adj, weights, assign, num_parts, max_load, passes)
    return Partition(num_parts, assign, np.bincount(assign, weights=weights, minlength=num_parts))


def import_partition(path, num_nodes: int, num_parts: int | None = None,
                     weights: np.ndarray | None = None) -> Partition:
    """Read a partition file with one part id per line."""
    rows = _read_rows(path)
    if len(rows) != num_nodes:
        raise GraphFormatError(f"{path}: {len(rows)} part ids for {num_nodes} nodes")
    try:
        assign = np.array([int(r[0]) for r in rows], dtype=np.int64)
    except ValueError:
        raise GraphFormatError(f"{path}: non-integer part id") from None
    if assign.size and assign.min() < 0:
        raise GraphFormatError(f"{path}: negative part id")
    top = int(assign.max()) + 1 if assign.size else 1
    if num_parts is None:
        num_parts = top
    elif top > num_parts:
        raise GraphFormatError(f"{path}: part id {top - 1} out of range for {num_parts} parts")
    w = np.ones(num_nodes) if weights is None else np.asarray(weights, float)
    return Partition(num_parts, assign, np.bincount(assign, weights=w, minlength=num_parts))


def save_partition(p: Partition, path) -> None:
    np.savetxt(path, p.assignment, fmt="%d")


# --------------------------------------------------------------------------
# Subgraphs
# --------------------------------------------------------------------------

@dataclass
class Subgraph:
    owner: int
    inner_nodes: np.ndarray
    local_csr: CsrGraph
    boundary_in: dict[int, np.ndarray]
    global_to_local: dict[int, int]
    # remote in-edges, global ids, grouped by the part owning the source
    cut_in: dict[int, tuple[np.ndarray, np.ndarray]]

    def to_local(self, gids) -> np.ndarray:
        return np.array([self.global_to_local[int(v)] for v in gids], dtype=np.int64)


def build_subgraphs(g: CsrGraph, p: Partition) -> list[Subgraph]:
    """Split ``g`` into per-part local graphs plus their incoming cut edges."""
    if p.assignment.shape != (g.num_nodes,):
        raise ValueError("partition does not match graph size")
    if p.assignment.size and (p.assignment.min() < 0 or p.assignment.max() >= p.num_parts):
        raise ValueError("partition assignment out of range")
    src, dst = g.edges()
    part_src, part_dst = p.assignment[src], p.assignment[dst]
    subs = []
    for owner in range(p.num_parts):
        inner = np.flatnonzero(p.assignment == owner)
        g2l = {int(v): i for i, v in enumerate(inner)}
        local = np.full(g.num_nodes, -1, dtype=np.int64)
        local[inner] = np.arange(inner.size)
        keep = (part_src == owner) & (part_dst == owner)
        local_csr = from_edges(inner.size, local[src[keep]], local[dst[keep]],
                               drop_self_loops=False,
                               features=g.features[inner], labels=g.labels[inner],
                               train_mask=g.train_mask[inner], val_mask=g.val_mask[inner],
                               test_mask=g.test_mask[inner])
        boundary, cut_in = {}, {}
        into = (part_dst == owner) & (part_src != owner)
        for other in range(p.num_parts):
            if other == owner:
                continue
            sel = into & (part_src == other)
            if np.any(sel):
                cut_in[other] = (src[sel], dst[sel])
                boundary[other] = np.unique(src[sel])
        subs.append(Subgraph(owner, inner, local_csr, boundary, g2l, cut_in))
    return subs


# --------------------------------------------------------------------------
# Synthetic graphs
# --------------------------------------------------------------------------

def erdos_renyi(n: int, prob: float, seed: int = 0, directed: bool = False) -> CsrGraph:
    rng = np.random.default_rng(seed)
    mask = rng.random((n, n)) < prob
    np.fill_diagonal(mask, False)
    if not directed:
        mask = np.triu(mask, 1)
    dst, src = np.nonzero(mask)
    return from_edges(n, src, dst, symmetrize=not directed)


def sbm_graph(num_nodes: int = 1000, num_blocks: int = 4, p_in: float = 0.02,
              p_out: float = 0.002, feat_dim: int = 32, feature_noise: float = 1.0,
              train_frac: float = 0.6, val_frac: float = 0.2, seed: int = 0) -> CsrGraph:
    """Stochastic block model with class-centred Gaussian features.

    Each block is one class; features are ``centroid[class] + noise``.
    """
    rng = np.random.default_rng(seed)
    labels = np.sort(rng.integers(num_blocks, size=num_nodes))
    same = labels[:, None] == labels[None, :]
    prob = np.where(same, p_in, p_out)
    mask = np.triu(rng.random((num_nodes, num_nodes)) < prob, 1)
    dst, src = np.nonzero(mask)
    centroids = rng.normal(size=(num_blocks, feat_dim))
    feats = centroids[labels] + feature_noise * rng.normal(size=(num_nodes, feat_dim))
    order = rng.permutation(num_nodes)
    n_train, n_val = int(train_frac * num_nodes), int(val_frac * num_nodes)
    train = np.zeros(num_nodes, bool)
    val = np.zeros(num_nodes, bool)
    test = np.zeros(num_nodes, bool)
    train[order[:n_train]] = True
    val[order[n_train:n_train + n_val]] = True
    test[order[n_train + n_val:]] = True
    return from_edges(num_nodes, src, dst, symmetrize=True,
                      features=feats.astype(np.float32), labels=labels.astype(np.int64),
                      train_mask=train, val_mask=val, test_mask=test)
