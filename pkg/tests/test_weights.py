"""Weight-matrix construction, validation, and serialization."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from sarnewton.errors import InvalidDesignError
from sarnewton.weights import (
    SpatialWeightSet,
    WeightDesignSpec,
    build_circulant,
    build_distance_rings,
    build_random_sparse,
    build_weights,
    circulant_weight_set,
    load_weight_set,
    save_weight_set,
    spectral_norm,
)


class TestCirculant:
    def test_first_row_i1_n4(self):
        w = build_circulant(1, 4).toarray()
        assert_array_equal(w[0], [0.0, 0.5, 0.0, 0.5])

    def test_first_row_i2_n6(self):
        # ones at positions 2, 3 and n-1, n of the unnormalized matrix,
        # divided by 2i = 4
        w = build_circulant(2, 6).toarray()
        assert_array_equal(w[0], [0.0, 0.25, 0.25, 0.0, 0.25, 0.25])

    def test_unnormalized_spectral_norm_is_2i(self):
        for i, n in ((1, 20), (2, 31), (3, 50)):
            w_star = build_circulant(i, n) * (2 * i)
            eigs = np.linalg.eigvalsh(w_star.toarray())
            assert_allclose(np.max(np.abs(eigs)), 2 * i, rtol=1e-12)
            assert_allclose(spectral_norm(w_star), 2 * i, rtol=1e-8)

    def test_row_sums_symmetry_diagonal(self):
        for i, n in ((1, 9), (3, 25), (6, 40)):
            w = build_circulant(i, n)
            assert_allclose(np.asarray(w.sum(axis=1)).ravel(), 1.0, atol=1e-12)
            assert (w != w.T).nnz == 0  # symmetric by index mirroring
            assert np.all(w.diagonal() == 0.0)

    def test_dimension_violation(self):
        with pytest.raises(InvalidDesignError):
            build_circulant(2, 4)
        with pytest.raises(InvalidDesignError):
            build_circulant(0, 10)

    def test_spectra_match_dense_eigenvalues(self):
        ws = circulant_weight_set(16, 2)
        for i in range(2):
            dense = np.sort(np.linalg.eigvalsh(ws.mats[i].toarray()))
            assert_allclose(np.sort(ws.spectra[:, i]), dense, atol=1e-10)

    def test_h_scale(self):
        ws = circulant_weight_set(20, 3)
        assert ws.h_scale == (2.0, 4.0, 6.0)


class TestRandomSparse:
    def test_symmetric_unit_spectral_norm(self):
        ws = build_random_sparse(100, 2, seed=5)
        for w in ws.mats:
            dense = w.toarray()
            assert_allclose(dense, dense.T, atol=0)
            eigs = np.linalg.eigvalsh(dense)
            assert abs(np.max(np.abs(eigs)) - 1.0) < 1e-10
            # power-iteration residual check of the normalization
            v = np.full(100, 1 / 10.0)
            for _ in range(200):
                nv = w @ v
                v = nv / np.linalg.norm(nv)
            assert abs(np.linalg.norm(w @ v) - 1.0) < 1e-8

    def test_determinism(self):
        a = build_random_sparse(60, 2, seed=9)
        b = build_random_sparse(60, 2, seed=9)
        for wa, wb in zip(a.mats, b.mats):
            assert (wa != wb).nnz == 0
            assert_array_equal(wa.data, wb.data)

    def test_fill_fraction(self):
        # One-sided draws keep an off-diagonal entry with probability
        # q = n^(1/3)/100; an unordered pair survives symmetrization iff
        # either direction was drawn, a Bernoulli(q(2-q)) event
        # independent across the n(n-1)/2 pairs.
        n = 400
        ws = build_random_sparse(n, 1, seed=3)
        q = n ** (1 / 3) / 100.0
        p_pair = q * (2.0 - q)
        n_pairs = n * (n - 1) // 2
        upper = np.triu(ws.mats[0].toarray(), k=1)
        frac = np.count_nonzero(upper) / n_pairs
        se = np.sqrt(p_pair * (1 - p_pair) / n_pairs)
        assert abs(frac - p_pair) < 3 * se

    def test_zero_diagonal(self):
        ws = build_random_sparse(50, 3, seed=1)
        for w in ws.mats:
            assert np.all(w.diagonal() == 0.0)


class TestDistanceRings:
    def test_three_points_all_half_mile(self):
        d = np.full((3, 3), 0.5)
        np.fill_diagonal(d, 0.0)
        ws = build_distance_rings(d, p=1)
        w = ws.mats[0].toarray()
        assert_allclose(w, np.array([[0, 0.5, 0.5], [0.5, 0, 0.5], [0.5, 0.5, 0]]))

    def test_ring_membership_by_hand(self):
        # d12 = 1.5 -> ring 2; d13 = 2.5 -> ring 3; d23 = 0.3 -> ring 1
        d = np.array([[0.0, 1.5, 2.5], [1.5, 0.0, 0.3], [2.5, 0.3, 0.0]])
        ws = build_distance_rings(d, p=3)
        w2 = ws.mats[1].toarray()
        assert w2[0, 1] == 1.0 and w2[1, 0] == 1.0
        assert np.count_nonzero(w2) == 2
        w3 = ws.mats[2].toarray()
        assert w3[0, 2] == 1.0 and w3[2, 0] == 1.0
        assert np.count_nonzero(w3) == 2
        assert ws.isolated_rows == (1, 1, 1)

    def test_disjoint_supports(self):
        rng = np.random.default_rng(2)
        pts = rng.uniform(0, 4, size=(30, 2))
        d = np.linalg.norm(pts[:, None] - pts[None, :], axis=2)
        d = (d + d.T) / 2
        np.fill_diagonal(d, 0.0)
        ws = build_distance_rings(d, p=4)
        support = sum((w != 0).astype(int) for w in ws.mats)
        assert support.max() <= 1

    def test_integer_boundary_goes_to_lower_ring(self):
        d = np.array([[0.0, 2.0], [2.0, 0.0]])
        ws = build_distance_rings(d, p=3)
        assert ws.mats[1].toarray()[0, 1] == 1.0  # ring 2, closed upper end
        assert ws.mats[2].nnz == 0

    def test_zero_distance_joins_ring_one(self):
        d = np.zeros((2, 2))
        ws = build_distance_rings(d, p=1)
        assert ws.mats[0].toarray()[0, 1] == 1.0

    def test_rejects_bad_distances(self):
        with pytest.raises(InvalidDesignError):
            build_distance_rings(np.array([[0.0, 1.0], [2.0, 0.0]]), p=1)
        with pytest.raises(InvalidDesignError):
            build_distance_rings(np.array([[0.0, -1.0], [-1.0, 0.0]]), p=1)


class TestTripletFiles:
    def _manifest(self, tmp_path, body, n=2, p=1):
        (tmp_path / "W1.csv").write_text(body)
        manifest = tmp_path / "weights_manifest.txt"
        manifest.write_text(f"n = {n}\np = {p}\nmatrix_1 = W1.csv\n")
        return manifest

    def test_round_trip_small(self, tmp_path):
        manifest = self._manifest(tmp_path, "row,col,value\n1,2,0.5\n2,1,0.5\n")
        ws = load_weight_set(manifest)
        assert_allclose(ws.mats[0].toarray(), [[0.0, 0.5], [0.5, 0.0]])

    def test_diagonal_entry_rejected(self, tmp_path):
        manifest = self._manifest(tmp_path, "row,col,value\n3,3,0.1\n", n=3)
        with pytest.raises(InvalidDesignError, match="diagonal"):
            load_weight_set(manifest)

    def test_empty_file_warns_and_gives_zero_matrix(self, tmp_path):
        manifest = self._manifest(tmp_path, "", n=5)
        with pytest.warns(UserWarning, match="empty"):
            ws = load_weight_set(manifest)
        assert ws.mats[0].shape == (5, 5)
        assert ws.mats[0].nnz == 0
        assert ws.h_scale == (np.inf,)

    def test_out_of_range_index(self, tmp_path):
        manifest = self._manifest(tmp_path, "row,col,value\n1,7,0.5\n", n=3)
        with pytest.raises(InvalidDesignError, match="out of range"):
            load_weight_set(manifest)

    def test_parse_failure(self, tmp_path):
        manifest = self._manifest(tmp_path, "row,col,value\n1,2,abc\n")
        with pytest.raises(InvalidDesignError, match="parse"):
            load_weight_set(manifest)

    def test_duplicate_triplets_summed(self, tmp_path):
        manifest = self._manifest(tmp_path, "row,col,value\n1,2,0.25\n1,2,0.25\n")
        ws = load_weight_set(manifest)
        assert ws.mats[0][0, 1] == 0.5

    def test_save_load_exact(self, tmp_path):
        original = build_random_sparse(40, 2, seed=11)
        manifest = save_weight_set(original, tmp_path)
        loaded = load_weight_set(manifest)
        for a, b in zip(original.mats, loaded.mats):
            assert (a != b).nnz == 0
            assert_array_equal(np.sort(a.tocoo().data), np.sort(b.tocoo().data))


class TestWeightSetValidation:
    def test_nonzero_diagonal_rejected(self):
        import scipy.sparse as sp

        bad = sp.csr_matrix(np.array([[0.1, 0.5], [0.5, 0.0]]))
        with pytest.raises(InvalidDesignError, match="diagonal"):
            SpatialWeightSet(mats=(bad,))

    def test_nonfinite_rejected(self):
        import scipy.sparse as sp

        bad = sp.csr_matrix(np.array([[0.0, np.nan], [0.5, 0.0]]))
        with pytest.raises(InvalidDesignError, match="finite"):
            SpatialWeightSet(mats=(bad,))

    def test_mismatched_sizes_rejected(self):
        a = build_circulant(1, 6)
        b = build_circulant(1, 8)
        with pytest.raises(InvalidDesignError, match="shape"):
            SpatialWeightSet(mats=(a, b))

    def test_design_spec_dispatch(self):
        ws = build_weights(WeightDesignSpec(kind="circulant", n=12, p=2))
        assert ws.kind == "circulant" and ws.p == 2
        ws = build_weights(WeightDesignSpec(kind="random_sparse", n=12, p=1, seed=4))
        assert ws.kind == "random_sparse"
        with pytest.raises(InvalidDesignError):
            WeightDesignSpec(kind="random_sparse", n=12, p=1)  # missing seed
        with pytest.raises(InvalidDesignError):
            WeightDesignSpec(kind="nope", n=12, p=1)
