from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridgcn.graph import Partition, build_subgraphs, erdos_renyi, partition_weighted
from hybridgcn.plan import (CommPlan, CutBipartite, MatchingNotMaximum, PlanError, VertexCover,
                            brute_force_mvc, build_cut_bipartite, classify_edges,
                            connected_components, hopcroft_karp, koenig_cover, max_matching,
                            plan_all)


def brute_force_matching(b):
    edges = b.edges
    for k in range(len(edges), 0, -1):
        for sub in combinations(edges, k):
            if len({u for u, _ in sub}) == k and len({v for _, v in sub}) == k:
                return k
    return 0


def random_bipartite(rng, max_side=12):
    nu, nv = rng.integers(1, max_side + 1, size=2)
    p = rng.uniform(0.05, 0.5)
    mask = rng.random((nu, nv)) < p
    u, v = np.nonzero(mask)
    return CutBipartite(np.arange(nu), 100 + np.arange(nv), list(zip(u.tolist(), (100 + v).tolist())))


class TestBipartite:
    def test_fixture(self, two_part):
        _, _, subs = two_part
        b = build_cut_bipartite(subs, 0, 1)
        np.testing.assert_array_equal(b.src_side, [3, 4, 5])
        np.testing.assert_array_equal(b.dst_side, [0, 1, 2])
        assert len(b.edges) == 5

    def test_no_cut_edges(self, two_part):
        _, _, subs = two_part
        b = build_cut_bipartite(subs, 1, 0)
        assert b.edges == [] and b.num_vertices == 0

    def test_single_edge(self):
        b = CutBipartite.from_edges([(7, 2)])
        assert b.src_side.tolist() == [7] and b.dst_side.tolist() == [2]

    def test_same_part_rejected(self, two_part):
        with pytest.raises(ValueError):
            build_cut_bipartite(two_part[2], 0, 0)

    def test_non_crossing_edge_rejected(self):
        with pytest.raises(ValueError):
            CutBipartite([1, 2], [10], [(1, 10), (10, 2)])

    def test_overlapping_sides_rejected(self):
        with pytest.raises(ValueError):
            CutBipartite([1, 2], [2], [(1, 2)])


class TestMatching:
    def test_fixture(self, two_part):
        b = build_cut_bipartite(two_part[2], 0, 1)
        m = hopcroft_karp(b)
        assert len(m) == 2 == brute_force_matching(b)

    def test_empty(self):
        assert hopcroft_karp(CutBipartite([], [], [])) == []

    def test_k33(self):
        b = CutBipartite.from_edges([(u, 10 + v) for u in range(3) for v in range(3)])
        assert len(hopcroft_karp(b)) == 3

    def test_matches_brute_force(self, rng):
        for _ in range(40):
            b = random_bipartite(rng, 5)
            m = hopcroft_karp(b)
            assert len({u for u, _ in m}) == len(m) == len({v for _, v in m})
            assert set(m) <= set(b.edges)
            assert len(m) == brute_force_matching(b)

    def test_long_augmenting_chain(self):
        # a staircase forces augmenting paths of increasing length
        n = 200
        edges = [(u, 1000 + u) for u in range(n)] + [(u + 1, 1000 + u) for u in range(n - 1)]
        assert len(hopcroft_karp(CutBipartite.from_edges(edges))) == n

    def test_components_flag_same_size(self, rng):
        for _ in range(20):
            b = random_bipartite(rng)
            assert len(max_matching(b, True)) == len(hopcroft_karp(b))
            assert sum(len(c.edges) for c in connected_components(b)) == len(b.edges)


class TestCover:
    def test_fixture(self, two_part):
        b = build_cut_bipartite(two_part[2], 0, 1)
        c = koenig_cover(b, hopcroft_karp(b))
        assert c.cover_src == {3} and c.cover_dst == {1}

    def test_empty(self):
        b = CutBipartite([], [], [])
        assert len(koenig_cover(b, [])) == 0

    def test_star(self):
        b = CutBipartite.from_edges([(0, 10 + k) for k in range(6)])
        c = koenig_cover(b, hopcroft_karp(b))
        assert c.cover_src == {0} and not c.cover_dst

    def test_rejects_non_maximum(self, two_part):
        b = build_cut_bipartite(two_part[2], 0, 1)
        with pytest.raises(MatchingNotMaximum):
            koenig_cover(b, [(4, 1)])

    def test_rejects_non_edge(self, two_part):
        b = build_cut_bipartite(two_part[2], 0, 1)
        with pytest.raises(PlanError):
            koenig_cover(b, [(5, 0)])

    def test_brute_force_examples(self, two_part):
        assert len(brute_force_mvc(build_cut_bipartite(two_part[2], 0, 1))) == 2
        k22 = CutBipartite.from_edges([(0, 10), (0, 11), (1, 10), (1, 11)])
        assert len(brute_force_mvc(k22)) == 2

    def test_brute_force_limit(self):
        b = CutBipartite.from_edges([(u, 100 + u) for u in range(23)])
        with pytest.raises(ValueError, match="limited"):
            brute_force_mvc(b)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 10), st.integers(1, 10),
       st.lists(st.tuples(st.integers(0, 9), st.integers(0, 9)), max_size=40))
def test_koenig_size_equals_matching_and_brute_force(nu, nv, pairs):
    edges = [(u, 100 + v) for u, v in pairs if u < nu and v < nv]
    b = CutBipartite(np.arange(nu), 100 + np.arange(nv), edges)
    m = hopcroft_karp(b)
    c = koenig_cover(b, m)
    assert c.covers(b)
    assert len(c) == len(m) == len(brute_force_mvc(b))


class TestClassify:
    def test_fixture(self, two_part):
        b = build_cut_bipartite(two_part[2], 0, 1)
        pp = classify_edges(b, koenig_cover(b, hopcroft_karp(b)), src_part=1, dst_part=0)
        assert pp.post_sends.tolist() == [3]
        assert list(pp.pre_groups) == [1]
        assert pp.pre_groups[1].tolist() == [4, 5]
        assert pp.volumes == {"vanilla": 5, "pre": 3, "post": 3, "hybrid": 2}

    def test_pure_pre(self):
        b = CutBipartite.from_edges([(u, 50) for u in range(5)])
        pp = classify_edges(b, koenig_cover(b, hopcroft_karp(b)))
        assert pp.hybrid_volume == 1 and pp.post_sends.size == 0

    def test_pure_post(self):
        b = CutBipartite.from_edges([(0, 50 + v) for v in range(5)])
        pp = classify_edges(b, koenig_cover(b, hopcroft_karp(b)))
        assert pp.hybrid_volume == 1 and not pp.pre_groups

    def test_both_endpoints_covered_goes_post(self):
        b = CutBipartite.from_edges([(0, 10), (0, 11), (1, 10)])
        cover = VertexCover(frozenset({0}), frozenset({10}))
        pp = classify_edges(b, cover)
        assert (0, 10) in set(zip(*(a.tolist() for a in pp.post_edges)))
        assert pp.pre_groups[10].tolist() == [1]

    def test_uncovered_edge(self):
        b = CutBipartite.from_edges([(0, 10), (1, 11)])
        with pytest.raises(PlanError):
            classify_edges(b, VertexCover(frozenset({0}), frozenset()))


def _reconstruct(g, part, plan, x):
    """Remote part of each destination's neighbour sum, rebuilt from the plan."""
    out = np.zeros_like(x)
    for pp in plan.pairs.values():
        ps, pd = pp.post_edges
        np.add.at(out, pd, x[ps])
        for dst, srcs in pp.pre_groups.items():
            out[dst] += x[srcs].sum(axis=0)
    return out


def _vanilla_remote(g, part, x):
    src, dst = g.edges()
    cut = part.assignment[src] != part.assignment[dst]
    out = np.zeros_like(x)
    np.add.at(out, dst[cut], x[src[cut]])
    return out


class TestPlanAll:
    def test_fixture_volumes(self, two_part):
        plan = plan_all(two_part[2])
        assert plan.volumes == {"vanilla": 5, "pre": 3, "post": 3, "hybrid": 2}
        assert list(plan.pairs) == [(1, 0)]

    def test_single_part(self):
        g = erdos_renyi(20, 0.2, seed=0)
        plan = plan_all(build_subgraphs(g, Partition(1, np.zeros(20, int))))
        assert plan.pairs == {} and set(plan.volumes.values()) == {0}

    @pytest.mark.parametrize("seed", range(5))
    def test_ordering_on_random_graph(self, seed):
        g = erdos_renyi(32, 0.15, seed=seed)
        subs = build_subgraphs(g, partition_weighted(g, 2, seed=seed))
        for (j, i), pp in plan_all(subs).pairs.items():
            v = pp.volumes
            assert v["hybrid"] <= min(v["pre"], v["post"]) <= max(v["pre"], v["post"]) <= v["vanilla"]
            assert v["hybrid"] == len(brute_force_mvc(build_cut_bipartite(subs, i, j)))

    @pytest.mark.parametrize("seed", range(4))
    def test_numerical_equivalence(self, seed):
        rng = np.random.default_rng(seed)
        g = erdos_renyi(60, 0.1, seed=seed)
        part = partition_weighted(g, 3, seed=seed)
        plan = plan_all(build_subgraphs(g, part))
        x32 = rng.standard_normal((60, 8)).astype(np.float32)
        got, ref = _reconstruct(g, part, plan, x32), _vanilla_remote(g, part, x32)
        assert np.abs(got - ref).max() <= 1e-6 * np.abs(ref).max()
        x64 = rng.integers(-1000, 1000, (60, 8)).astype(np.float64)
        np.testing.assert_array_equal(_reconstruct(g, part, plan, x64), _vanilla_remote(g, part, x64))

    def test_each_edge_once(self):
        g = erdos_renyi(50, 0.12, seed=3)
        part = partition_weighted(g, 4, seed=1)
        plan = plan_all(build_subgraphs(g, part))
        seen = []
        for pp in plan.pairs.values():
            seen += list(zip(*(a.tolist() for a in pp.post_edges)))
            seen += [(u, d) for d, us in pp.pre_groups.items() for u in us.tolist()]
        src, dst = g.edges()
        cut = part.assignment[src] != part.assignment[dst]
        assert sorted(seen) == sorted(zip(src[cut].tolist(), dst[cut].tolist()))

    def test_blob_round_trip(self):
        g = erdos_renyi(50, 0.12, seed=4)
        plan = plan_all(build_subgraphs(g, partition_weighted(g, 3, seed=0)))
        back = CommPlan.from_bytes(plan.to_bytes())
        assert back.volumes == plan.volumes
        for key, pp in plan.pairs.items():
            qq = back.pairs[key]
            np.testing.assert_array_equal(pp.post_sends, qq.post_sends)
            assert {k: v.tolist() for k, v in pp.pre_groups.items()} == \
                   {k: v.tolist() for k, v in qq.pre_groups.items()}
            assert pp.matching_size == qq.matching_size

    def test_blob_bad_magic(self):
        with pytest.raises(ValueError, match="magic"):
            CommPlan.from_bytes(b"NOPE" + bytes(12))

    def test_volume_rows(self, two_part):
        rows = plan_all(two_part[2]).volume_rows()
        assert rows == [{"pair": "1->0", "vanilla": 5, "pre": 3, "post": 3, "hybrid": 2,
                         "matching_size": 2}]
