"""Communication planning for cut edges.

For every ordered worker pair ``j -> i`` the cut edges form a bipartite
graph between boundary sources (owned by ``j``) and destinations (owned by
``i``). A minimum vertex cover of that graph is the smallest set of rows that
must cross the wire: a covered source is shipped raw and aggregated at the
receiver (post-aggregation), a covered destination receives one partial sum
computed at the sender (pre-aggregation).
"""

from __future__ import annotations

import io
import struct
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .graph import Subgraph

PLAN_MAGIC = b"MGCP"
PLAN_VERSION = 1
BRUTE_FORCE_LIMIT = 22


class PlanError(RuntimeError):
    """Internal planning invariant violated."""


class MatchingNotMaximum(PlanError):
    """The matching handed to the cover construction admits an augmenting path."""


@dataclass
class CutBipartite:
    src_side: np.ndarray
    dst_side: np.ndarray
    edges: list[tuple[int, int]]

    def __post_init__(self):
        self.src_side = np.unique(np.asarray(self.src_side, dtype=np.int64))
        self.dst_side = np.unique(np.asarray(self.dst_side, dtype=np.int64))
        self.edges = sorted({(int(u), int(v)) for u, v in self.edges})
        srcs, dsts = set(self.src_side.tolist()), set(self.dst_side.tolist())
        if srcs & dsts:
            raise ValueError("a vertex cannot sit on both sides of the bipartite graph")
        for u, v in self.edges:
            if u not in srcs or v not in dsts:
                raise ValueError(f"edge ({u}, {v}) does not cross from src side to dst side")

    @classmethod
    def from_edges(cls, edges) -> "CutBipartite":
        edges = list(edges)
        return cls([u for u, _ in edges], [v for _, v in edges], edges)

    @property
    def num_vertices(self) -> int:
        return int(self.src_side.size + self.dst_side.size)

    def adjacency(self) -> dict[int, list[int]]:
        adj = {int(u): [] for u in self.src_side}
        for u, v in self.edges:
            adj[u].append(v)
        return adj


@dataclass
class VertexCover:
    cover_src: frozenset
    cover_dst: frozenset

    def __len__(self) -> int:
        return len(self.cover_src) + len(self.cover_dst)

    def covers(self, b: CutBipartite) -> bool:
        return all(u in self.cover_src or v in self.cover_dst for u, v in b.edges)


def build_cut_bipartite(subs: list[Subgraph], i: int, j: int) -> CutBipartite:
    """Cut edges whose source lives on part ``j`` and destination on part ``i``."""
    if i == j:
        raise ValueError("a part has no cut edges with itself")
    src, dst = subs[i].cut_in.get(j, (np.empty(0, np.int64), np.empty(0, np.int64)))
    return CutBipartite(src, dst, list(zip(src.tolist(), dst.tolist())))


def hopcroft_karp(b: CutBipartite) -> list[tuple[int, int]]:
    """Maximum-cardinality matching, returned as ``(src, dst)`` pairs sorted by src."""
    adj = b.adjacency()
    left = [int(u) for u in b.src_side]
    match_l: dict[int, int] = {}
    match_r: dict[int, int] = {}
    inf = len(left) + 1

    while True:
        # BFS layering from free left vertices
        dist = {}
        q = deque()
        for u in left:
            if u not in match_l:
                dist[u] = 0
                q.append(u)
            else:
                dist[u] = inf
        found = inf
        while q:
            u = q.popleft()
            if dist[u] >= found:
                continue
            for v in adj[u]:
                w = match_r.get(v)
                if w is None:
                    found = min(found, dist[u] + 1)
                elif dist[w] == inf:
                    dist[w] = dist[u] + 1
                    q.append(w)
        if found == inf:
            break
        # iterative DFS along the layering
        for root in left:
            if root in match_l:
                continue
            stack = [(root, iter(adj[root]))]
            path = []
            while stack:
                u, it = stack[-1]
                advanced = False
                for v in it:
                    w = match_r.get(v)
                    if w is None:
                        if dist[u] + 1 == found:
                            path.append((u, v))
                            for pu, pv in path:
                                match_l[pu] = pv
                                match_r[pv] = pu
                            stack.clear()
                            advanced = True
                            break
                    elif dist.get(w) == dist[u] + 1:
                        path.append((u, v))
                        stack.append((w, iter(adj[w])))
                        advanced = True
                        break
                if not advanced:
                    dist[u] = inf
                    stack.pop()
                    if path:
                        path.pop()
    return sorted(match_l.items())


def koenig_cover(b: CutBipartite, matching) -> VertexCover:
    """Minimum vertex cover from a maximum matching (König's construction).

    Let Z be everything reachable from unmatched sources by alternating
    paths (non-matching edge src->dst, matching edge dst->src). The cover is
    ``(src \\ Z) | (dst & Z)``.
    """
    adj = b.adjacency()
    match_l = {int(u): int(v) for u, v in matching}
    match_r = {v: u for u, v in match_l.items()}
    if len(match_r) != len(match_l):
        raise PlanError("matching uses a destination twice")
    edge_set = set(b.edges)
    for u, v in match_l.items():
        if (u, v) not in edge_set:
            raise PlanError(f"matched pair ({u}, {v}) is not an edge")
    seen_l = {u for u in adj if u not in match_l}
    seen_r = set()
    q = deque(seen_l)
    while q:
        u = q.popleft()
        for v in adj[u]:
            if v in seen_r or match_l.get(u) == v:
                continue
            seen_r.add(v)
            w = match_r.get(v)
            if w is None:
                raise MatchingNotMaximum(f"augmenting path ends at unmatched destination {v}")
            if w not in seen_l:
                seen_l.add(w)
                q.append(w)
    cover = VertexCover(frozenset(u for u in adj if u not in seen_l), frozenset(seen_r))
    if len(cover) != len(match_l) or not cover.covers(b):
        raise PlanError("cover construction produced an invalid cover")
    return cover


def brute_force_mvc(b: CutBipartite) -> VertexCover:
    """Exhaustive minimum vertex cover; a test oracle for small graphs.

    Enumerates every subset ``S`` of the smaller side. Edges not touched by
    ``S`` must be covered by their other endpoint, so each subset fixes the
    rest of the cover and the minimum over all ``2^|side|`` subsets is exact.
    """
    smaller = min(b.src_side.size, b.dst_side.size)
    if smaller > BRUTE_FORCE_LIMIT:
        raise ValueError(f"brute force limited to {BRUTE_FORCE_LIMIT} vertices on the "
                         f"smaller side, got {smaller}")
    flip = b.src_side.size > b.dst_side.size
    side = [int(x) for x in (b.dst_side if flip else b.src_side)]
    other = [int(x) for x in (b.src_side if flip else b.dst_side)]
    pos_side = {x: k for k, x in enumerate(side)}
    pos_other = {x: k for k, x in enumerate(other)}
    nbr = [0] * len(side)
    for u, v in b.edges:
        a, c = (v, u) if flip else (u, v)
        nbr[pos_side[a]] |= 1 << pos_other[c]
    full = (1 << len(side)) - 1
    # union of neighbour masks for every subset, built by peeling the low bit
    union = [0] * (full + 1)
    for mask in range(1, full + 1):
        low = (mask & -mask).bit_length() - 1
        union[mask] = union[mask & (mask - 1)] | nbr[low]
    best = None
    for chosen in range(full + 1):
        size = bin(chosen).count("1") + bin(union[full ^ chosen]).count("1")
        if best is None or size < best[0]:
            best = (size, chosen)
    _, chosen = best
    picked = frozenset(x for k, x in enumerate(side) if chosen >> k & 1)
    forced = union[full ^ chosen]
    completed = frozenset(x for k, x in enumerate(other) if forced >> k & 1)
    return VertexCover(completed, picked) if flip else VertexCover(picked, completed)


@dataclass
class PairPlan:
    """Schedule for cut edges flowing from ``src_part`` to ``dst_part``.

    Payload row order on the wire: ``post_sends`` first, then one partial
    row per key of ``pre_groups``; both sorted by global id.
    """

    src_part: int
    dst_part: int
    post_sends: np.ndarray
    post_edges: tuple[np.ndarray, np.ndarray]
    pre_groups: dict[int, np.ndarray]
    matching_size: int
    num_edges: int
    num_src: int
    num_dst: int

    @property
    def pre_dsts(self) -> np.ndarray:
        return np.array(sorted(self.pre_groups), dtype=np.int64)

    @property
    def hybrid_volume(self) -> int:
        return int(self.post_sends.size + len(self.pre_groups))

    @property
    def volumes(self) -> dict[str, int]:
        return {
            "vanilla": self.num_edges,
            "pre": self.num_dst,
            "post": self.num_src,
            "hybrid": self.hybrid_volume,
        }


def classify_edges(b: CutBipartite, cover: VertexCover, src_part: int = 1,
                   dst_part: int = 0, matching_size: int | None = None) -> PairPlan:
    """Assign each cut edge to post-aggregation (source covered) or pre-aggregation."""
    post_src, post_dst = [], []
    groups: dict[int, list[int]] = {}
    for u, v in b.edges:
        if u in cover.cover_src:
            post_src.append(u)
            post_dst.append(v)
        elif v in cover.cover_dst:
            groups.setdefault(v, []).append(u)
        else:
            raise PlanError(f"edge ({u}, {v}) is not covered")
    sends = np.unique(np.asarray(post_src, dtype=np.int64))
    pre = {v: np.array(sorted(us), dtype=np.int64) for v, us in sorted(groups.items())}
    plan = PairPlan(
        src_part, dst_part, sends,
        (np.asarray(post_src, dtype=np.int64), np.asarray(post_dst, dtype=np.int64)),
        pre, len(cover) if matching_size is None else matching_size,
        len(b.edges), len({u for u, _ in b.edges}), len({v for _, v in b.edges}))
    if plan.hybrid_volume > len(cover):
        raise PlanError("hybrid volume exceeds cover size")
    return plan


VOLUME_KEYS = ("vanilla", "pre", "post", "hybrid")


@dataclass
class CommPlan:
    num_parts: int
    pairs: dict[tuple[int, int], PairPlan] = field(default_factory=dict)

    def pair(self, src_part: int, dst_part: int) -> PairPlan | None:
        return self.pairs.get((src_part, dst_part))

    @property
    def volumes(self) -> dict[str, int]:
        tot = dict.fromkeys(VOLUME_KEYS, 0)
        for pp in self.pairs.values():
            for k, v in pp.volumes.items():
                tot[k] += v
        return tot

    def volume_rows(self) -> list[dict]:
        rows = []
        for (j, i), pp in sorted(self.pairs.items()):
            rows.append({"pair": f"{j}->{i}", **pp.volumes, "matching_size": pp.matching_size})
        return rows

    def to_bytes(self) -> bytes:
        out = io.BytesIO()
        out.write(struct.pack("<4sIII", PLAN_MAGIC, PLAN_VERSION, self.num_parts, len(self.pairs)))

        def arr(a):
            a = np.asarray(a, dtype="<i8")
            out.write(struct.pack("<Q", a.size))
            out.write(a.tobytes())

        for (j, i), pp in sorted(self.pairs.items()):
            out.write(struct.pack("<IIQQQQ", j, i, pp.matching_size, pp.num_edges, pp.num_src, pp.num_dst))
            arr(pp.post_sends)
            arr(pp.post_edges[0])
            arr(pp.post_edges[1])
            keys = pp.pre_dsts
            arr(keys)
            arr([pp.pre_groups[int(k)].size for k in keys])
            arr(np.concatenate([pp.pre_groups[int(k)] for k in keys]) if keys.size else [])
        return out.getvalue()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "CommPlan":
        magic, version, num_parts, npairs = struct.unpack_from("<4sIII", buf, 0)
        if magic != PLAN_MAGIC:
            raise ValueError(f"bad plan magic {magic!r}")
        if version != PLAN_VERSION:
            raise ValueError(f"unsupported plan version {version}")
        pos = 16

        def arr():
            nonlocal pos
            (n,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            a = np.frombuffer(buf, "<i8", n, pos).astype(np.int64)
            pos += 8 * n
            return a

        plan = cls(num_parts)
        for _ in range(npairs):
            j, i, msize, nedges, nsrc, ndst = struct.unpack_from("<IIQQQQ", buf, pos)
            pos += struct.calcsize("<IIQQQQ")
            sends, ps, pd, keys, sizes, flat = arr(), arr(), arr(), arr(), arr(), arr()
            splits = np.split(flat, np.cumsum(sizes)[:-1]) if keys.size else []
            groups = {int(k): g for k, g in zip(keys, splits)}
            plan.pairs[(j, i)] = PairPlan(j, i, sends, (ps, pd), groups, int(msize),
                                       int(nedges), int(nsrc), int(ndst))
        return plan


def connected_components(b: CutBipartite) -> list[CutBipartite]:
    """Split ``b`` into its connected components (isolated vertices dropped)."""
    parent: dict = {}

    def find(x):
        while parent.setdefault(x, x) != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for u, v in b.edges:
        ru, rv = find(("s", u)), find(("d", v))
        if ru != rv:
            parent[ru] = rv
    groups: dict = {}
    for u, v in b.edges:
        groups.setdefault(find(("s", u)), []).append((u, v))
    return [CutBipartite.from_edges(es) for es in groups.values()]


def max_matching(b: CutBipartite, split_components: bool = False) -> list[tuple[int, int]]:
    if not split_components:
        return hopcroft_karp(b)
    return sorted(m for comp in connected_components(b) for m in hopcroft_karp(comp))


def plan_pair(subs: list[Subgraph], i: int, j: int,
              split_components: bool = False) -> PairPlan | None:
    b = build_cut_bipartite(subs, i, j)
    if not b.edges:
        return None
    matching = max_matching(b, split_components)
    cover = koenig_cover(b, matching)
    return classify_edges(b, cover, src_part=j, dst_part=i, matching_size=len(matching))


def plan_all(subs: list[Subgraph], split_components: bool = False) -> CommPlan:
    """Plan every ordered pair; pairs without cut edges are omitted.

    ``split_components`` matches each connected component separately; the
    matching size and therefore every volume are unchanged.
    """
    plan = CommPlan(len(subs))
    for i in range(len(subs)):
        for j in range(len(subs)):
            if i == j:
                continue
            pp = plan_pair(subs, i, j, split_components)
            if pp is not None:
                plan.pairs[(j, i)] = pp
    return plan
