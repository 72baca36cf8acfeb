import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridgcn.graph import erdos_renyi, from_edges
from hybridgcn.kernels import (SpmmOperator, build_plan, index_add, index_add_naive,
                               index_add_opt, spmm, spmm_naive)


def rel_err(a, b):
    scale = np.abs(b).max()
    return np.abs(a - b).max() / scale if scale > 0 else np.abs(a - b).max()


class TestNaive:
    def test_all_to_one_row(self):
        out = index_add_naive(np.zeros((2, 2)), np.array([[1.0, 1], [2, 2]]), [0, 0])
        np.testing.assert_array_equal(out, [[3, 3], [0, 0]])

    def test_identity(self, rng):
        dst, src = rng.standard_normal((2, 5, 3))
        np.testing.assert_array_equal(index_add_naive(dst, src, np.arange(5)), dst + src)

    def test_swap(self):
        a, b = [1.0, 2.0], [10.0, 20.0]
        out = index_add_naive(np.zeros((2, 2)), np.array([a, b]), [1, 0])
        np.testing.assert_array_equal(out, [b, a])

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            index_add_naive(np.zeros((2, 2)), np.ones((1, 2)), [2])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            index_add_naive(np.zeros((2, 3)), np.ones((2, 2)), [0, 1])
        with pytest.raises(ValueError):
            index_add_naive(np.zeros((2, 2)), np.ones((2, 2)), [0])


class TestPlan:
    def test_hand_sorted(self):
        p = build_plan([2, 0, 2, 1], 4)
        assert p.sorted_idx.tolist() == [0, 1, 2, 2]
        assert p.cluster_offsets.tolist() == [0, 1, 2, 4]
        assert p.perm.tolist() == [1, 3, 0, 2]

    def test_single_cluster_splits_columns(self):
        p = build_plan(np.zeros(64, int), 64, num_threads=4)
        assert p.num_clusters == 1
        assert len(p.col_blocks) == 4
        assert all((hi - lo) % 16 == 0 for lo, hi in p.col_blocks)

    def test_sorted_distinct(self):
        p = build_plan(np.arange(10), 3)
        assert p.perm.tolist() == list(range(10))
        assert np.all(np.diff(p.cluster_offsets) == 1)

    @pytest.mark.parametrize("threads", [2, 3, 4, 8])
    def test_load_balance(self, rng, threads):
        for _ in range(20):
            n = int(rng.integers(threads * 8, 512))
            idx = rng.integers(0, rng.integers(1, 64), size=n)
            p = build_plan(idx, 16, threads)
            flops = p.row_flops()
            assert flops.max() <= 1.15 * flops.mean()

    def test_columns_cover_width(self):
        for f in (1, 7, 16, 33, 256):
            p = build_plan(np.zeros(40, int), f, num_threads=4)
            cols = sorted(p.col_blocks)
            assert cols[0][0] == 0 and cols[-1][1] == f
            assert all(a[1] == b[0] for a, b in zip(cols, cols[1:]))


def random_instance(rng, dtype):
    n = int(rng.integers(0, 513))
    f = int(rng.choice([1, 7, 16, 33, 256]))
    rows = int(rng.integers(1, 80))
    skew = rng.random() < 0.3
    idx = (rng.zipf(1.5, n) - 1) % rows if skew else rng.integers(0, rows, n)
    dst = rng.standard_normal((rows, f)).astype(dtype)
    src = rng.standard_normal((n, f)).astype(dtype)
    return dst, src, idx


class TestOptimized:
    def test_fp32_matches_naive(self, rng):
        for _ in range(150):
            dst, src, idx = random_instance(rng, np.float32)
            threads = int(rng.integers(1, 6))
            got = index_add_opt(dst, src, build_plan(idx, src.shape[1], threads))
            assert rel_err(got, index_add_naive(dst, src, idx)) <= 1e-6

    def test_fp64_exact_mode_bitwise(self, rng):
        for _ in range(150):
            dst, src, idx = random_instance(rng, np.float64)
            threads = int(rng.integers(1, 6))
            got = index_add(dst, src, idx, num_threads=threads, exact=True)
            np.testing.assert_array_equal(got, index_add_naive(dst, src, idx))

    def test_fp64_split_clusters_close(self, rng):
        idx = np.zeros(500, int)
        src = rng.standard_normal((500, 20))
        dst = rng.standard_normal((3, 20))
        got = index_add_opt(dst, src, build_plan(idx, 20, 4))
        assert rel_err(got, index_add_naive(dst, src, idx)) < 1e-12

    def test_empty_src(self, rng):
        dst = rng.standard_normal((4, 3))
        out = index_add(dst, np.zeros((0, 3)), np.zeros(0, int))
        np.testing.assert_array_equal(out, dst)

    def test_feature_width_one(self, rng):
        dst, src = np.zeros((5, 1)), rng.standard_normal((40, 1))
        idx = rng.integers(0, 5, 40)
        np.testing.assert_array_equal(index_add(dst, src, idx, 3), index_add_naive(dst, src, idx))

    def test_input_untouched(self, rng):
        dst = rng.standard_normal((4, 3))
        keep = dst.copy()
        index_add(dst, np.ones((2, 3)), [0, 1])
        np.testing.assert_array_equal(dst, keep)

    def test_plan_mismatch(self, rng):
        plan = build_plan([0, 1], 3)
        with pytest.raises(ValueError):
            index_add_opt(np.zeros((2, 3)), np.ones((3, 3)), plan)
        with pytest.raises(ValueError):
            index_add_opt(np.zeros((2, 4)), np.ones((2, 3)), plan)

    @pytest.mark.parametrize("tile", [1, 4, 16, 64])
    def test_tile_width_irrelevant(self, rng, tile):
        dst, src, idx = np.zeros((9, 33)), rng.standard_normal((100, 33)), rng.integers(0, 9, 100)
        got = index_add_opt(dst, src, build_plan(idx, 33, 2, tile=tile, exact=True))
        np.testing.assert_array_equal(got, index_add_naive(dst, src, idx))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(1, 12), st.integers(1, 5), st.integers(0, 2**31),
       st.floats(-3, 3), st.floats(-3, 3))
def test_linearity(n, f, threads, seed, a, b):
    rng = np.random.default_rng(seed)
    rows = max(1, n // 3)
    idx = rng.integers(0, rows, n)
    # integer-valued data keeps every FP64 sum exact, so linearity holds bit for bit
    s1, s2 = rng.integers(-50, 50, (2, n, f)).astype(np.float64)
    dst = rng.integers(-50, 50, (rows, f)).astype(np.float64)
    a, b = round(a * 4) / 4, round(b * 4) / 4
    zero = np.zeros_like(dst)
    lhs = index_add(dst, a * s1 + b * s2, idx, threads)
    rhs = a * index_add(zero, s1, idx, threads) + b * index_add(zero, s2, idx, threads) + dst
    np.testing.assert_array_equal(lhs, rhs)


class TestSpmm:
    def test_triangle(self, rng):
        g = from_edges(3, [0, 1, 2], [1, 2, 0], symmetrize=True)
        h = rng.standard_normal((3, 4))
        out = spmm(g, h)
        for i in range(3):
            np.testing.assert_allclose(out[i], h.sum(axis=0) - h[i], rtol=1e-12)

    def test_edgeless(self, rng):
        g = from_edges(5, [], [])
        assert not spmm(g, rng.standard_normal((5, 3)), "mean").any()

    def test_mean_isolated_zero(self):
        g = from_edges(3, [0], [1])
        out = spmm(g, np.ones((3, 2)), "mean")
        np.testing.assert_array_equal(out, [[0, 0], [1, 1], [0, 0]])

    @pytest.mark.parametrize("seed", range(10))
    def test_dense_oracle(self, seed):
        rng = np.random.default_rng(seed)
        g = erdos_renyi(int(rng.integers(2, 65)), 0.2, seed=seed)
        h = rng.standard_normal((g.num_nodes, 16))
        a = g.dense_adjacency()
        assert rel_err(spmm(g, h), a @ h) <= 1e-12
        assert rel_err(spmm(g, h.astype(np.float32)), (a @ h).astype(np.float32)) <= 1e-6
        deg = a.sum(axis=1, keepdims=True)
        mean = np.divide(a @ h, deg, out=np.zeros_like(h), where=deg > 0)
        assert rel_err(spmm(g, h, "mean"), mean) <= 1e-12

    def test_naive_bitwise(self, rng):
        g = erdos_renyi(50, 0.15, seed=2, directed=True)
        h = rng.standard_normal((50, 9))
        for mode in ("sum", "mean"):
            np.testing.assert_array_equal(spmm(g, h, mode, num_threads=3), spmm_naive(g, h, mode))

    def test_shape_error(self):
        with pytest.raises(ValueError):
            spmm(from_edges(3, [0], [1]), np.ones((4, 2)))

    def test_bad_mode(self):
        op = SpmmOperator([0, 0], [], 1)
        with pytest.raises(ValueError):
            op(np.ones((1, 2)), "max")
