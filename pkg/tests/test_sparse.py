import numpy as np
import pytest

from sparsemem.sparse import (
    ContractViolation,
    SparseRowMatrix,
    SparseVector,
    renormalized,
    row_zero,
    sparse_combine,
    sparse_outer_add,
    sparse_weighted_sum,
    truncate_top_k,
)


class TestSparseVector:
    def test_sorted_and_compacted(self):
        v = SparseVector(10, [7, 2, 5], [1.0, 0.0, 3.0])
        assert v.idx.tolist() == [5, 7]
        assert v.val.tolist() == [3.0, 1.0]
        assert v.nnz == 2

    def test_round_trip_dense(self, rng):
        d = rng.normal(size=20)
        d[rng.random(20) < 0.5] = 0.0
        v = SparseVector.from_dense(d)
        np.testing.assert_array_equal(v.to_dense(), d)

    def test_duplicate_indices_rejected(self):
        with pytest.raises(ContractViolation):
            SparseVector(5, [1, 1], [1.0, 2.0])

    def test_out_of_range_rejected(self):
        with pytest.raises(ContractViolation):
            SparseVector(5, [5], [1.0])
        with pytest.raises(ContractViolation):
            SparseVector(5, [-1], [1.0])

    def test_one_hot(self):
        v = SparseVector.one_hot(8, 3, 2.5)
        assert v.get(3) == 2.5 and v.get(2) == 0.0
        assert SparseVector.one_hot(8, 0, 0.0).nnz == 0
        with pytest.raises(ContractViolation):
            SparseVector.one_hot(8, 8)

    def test_scaled_and_sum(self):
        v = SparseVector(6, [1, 4], [2.0, -3.0])
        assert v.scaled(2.0).to_dense().tolist() == (2.0 * v.to_dense()).tolist()
        assert v.scaled(0.0).nnz == 0
        assert v.sum() == -1.0

    def test_equality(self):
        a = SparseVector(5, [1], [2.0])
        assert a == SparseVector(5, [1], [2.0])
        assert a != SparseVector(5, [1], [3.0])
        assert a != SparseVector(6, [1], [2.0])


def test_sparse_combine_matches_dense(rng):
    dim = 30
    parts = []
    expect = np.zeros(dim)
    for _ in range(5):
        d = np.where(rng.random(dim) < 0.3, rng.normal(size=dim), 0.0)
        c = float(rng.normal())
        parts.append((c, SparseVector.from_dense(d)))
        expect += c * d
    got = sparse_combine(parts, dim).to_dense()
    np.testing.assert_allclose(got, expect, atol=1e-15)


def test_sparse_combine_cancellation_drops_zeros():
    v = SparseVector(4, [1], [1.0])
    out = sparse_combine([(1.0, v), (-1.0, v)], 4)
    assert out.nnz == 0


def test_truncate_top_k_tie_breaks_to_lower_index():
    v = SparseVector(10, [2, 5, 7, 9], [2.0, 3.0, 2.0, 1.0])
    t = truncate_top_k(v, 2)
    # ties at 2.0 resolve toward index 2, not 7
    assert t.idx.tolist() == [2, 5]
    assert truncate_top_k(v, 10) is v


def test_renormalized():
    v = SparseVector(5, [0, 3], [1.0, 3.0])
    np.testing.assert_allclose(renormalized(v).val, [0.25, 0.75])
    z = SparseVector(5)
    assert renormalized(z) is z


def test_weighted_sum_and_outer_add_match_dense(rng):
    mat = rng.normal(size=(12, 5))
    w = SparseVector(12, [2, 7, 9], rng.normal(size=3))
    np.testing.assert_allclose(sparse_weighted_sum(w, mat),
                               w.to_dense() @ mat, atol=1e-14)
    a = rng.normal(size=5)
    dense = mat + np.outer(w.to_dense(), a)
    touched = sparse_outer_add(mat, w, a)
    np.testing.assert_allclose(mat, dense, atol=1e-14)
    assert touched.tolist() == [2, 7, 9]


def test_weighted_sum_empty_weight():
    out = sparse_weighted_sum(SparseVector(4), np.ones((4, 3)))
    assert out.tolist() == [0.0, 0.0, 0.0]


def test_row_zero_returns_evicted_copy(rng):
    mat = rng.normal(size=(4, 3))
    old = mat[2].copy()
    got = row_zero(mat, 2)
    np.testing.assert_array_equal(got, old)
    assert not mat[2].any()


class TestSparseRowMatrix:
    def build_random(self, rng, rows=20, cols=20, cap=6, track=True):
        m = SparseRowMatrix(rows, cols, cap, track_columns=track)
        dense = np.zeros((rows, cols))
        for i in range(rows):
            n = int(rng.integers(0, cap + 1))
            cols_i = rng.choice(cols, size=n, replace=False)
            vals_i = rng.normal(size=n)
            m.set_row(i, cols_i, vals_i)
            dense[i] = 0.0
            dense[i, cols_i] = vals_i
        return m, dense

    def test_set_row_get_to_dense(self, rng):
        m, dense = self.build_random(rng)
        np.testing.assert_array_equal(m.to_dense(), dense)
        assert m.get(3, 5) == dense[3, 5]
        m.check()

    def test_capacity_enforced(self):
        m = SparseRowMatrix(4, 10, 2)
        with pytest.raises(ContractViolation):
            m.set_row(0, [1, 2, 3], [1.0, 1.0, 1.0])

    def test_duplicate_columns_rejected(self):
        m = SparseRowMatrix(4, 10, 4)
        with pytest.raises(ContractViolation):
            m.set_row(0, [1, 1], [1.0, 2.0])

    def test_zero_values_dropped(self):
        m = SparseRowMatrix(4, 10, 4)
        m.set_row(1, [3, 5], [0.0, 2.0])
        cols, vals = m.row(1)
        assert cols.tolist() == [5] and vals.tolist() == [2.0]
        m.set_row(1, [5], [0.0])
        assert 1 not in m.data

    def test_scale_column_matches_dense(self, rng):
        m, dense = self.build_random(rng)
        m.scale_column(7, 0.25)
        dense[:, 7] *= 0.25
        np.testing.assert_allclose(m.to_dense(), dense, atol=1e-15)
        m.check()
        m.scale_column(7, 0.0)
        dense[:, 7] = 0.0
        np.testing.assert_array_equal(m.to_dense(), dense)
        m.check()

    def test_scale_column_requires_colmap(self):
        m = SparseRowMatrix(4, 4, 2, track_columns=False)
        with pytest.raises(ContractViolation):
            m.scale_column(0, 0.5)

    def test_matvec_sparse_matches_dense(self, rng):
        m, dense = self.build_random(rng)
        wd = np.where(rng.random(20) < 0.3, rng.normal(size=20), 0.0)
        w = SparseVector.from_dense(wd)
        got = m.matvec_sparse(w).to_dense()
        np.testing.assert_allclose(got, dense @ wd, atol=1e-14)

    def test_csr_matches_scipy(self, rng):
        scipy_sparse = pytest.importorskip("scipy.sparse")
        m, dense = self.build_random(rng)
        offsets, cols, vals = m.csr()
        ref = scipy_sparse.csr_matrix(dense)
        np.testing.assert_array_equal(offsets, ref.indptr)
        np.testing.assert_array_equal(cols, ref.indices)
        np.testing.assert_allclose(vals, ref.data, atol=0)

    def test_check_detects_corruption(self):
        m = SparseRowMatrix(4, 10, 3, track_columns=True)
        m.set_row(0, [1, 2], [1.0, 2.0])
        m.data[0][1][0] = 0.0          # stored explicit zero
        with pytest.raises(ContractViolation):
            m.check()

    def test_check_detects_colmap_desync(self):
        m = SparseRowMatrix(4, 10, 3, track_columns=True)
        m.set_row(0, [1], [1.0])
        m.colmap[9] = {0}
        with pytest.raises(ContractViolation):
            m.check()

    def test_nnz(self, rng):
        m, dense = self.build_random(rng)
        assert m.nnz == int((dense != 0).sum())
