import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from repspace import geometry as geo


def brute_force_distances(m):
    n = m.shape[0]
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            out[i, j] = np.sqrt(((m[i] - m[j]) ** 2).sum())
    return out


class TestRowDistances:
    def test_identical_rows(self):
        m = np.ones((3, 4))
        np.testing.assert_array_equal(geo.row_distances(m), np.zeros((3, 3)))

    def test_unit_basis(self):
        m = np.eye(2)
        d = geo.row_distances(m)
        assert d[0, 1] == pytest.approx(np.sqrt(2))
        assert d[0, 0] == 0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        m = rng.standard_normal((5, 5))
        np.testing.assert_allclose(geo.row_distances(m), brute_force_distances(m),
                                   atol=1e-12)


class TestWeightedMds:
    def test_collinear_points_recover_line(self):
        d = np.array([[0.0, 1.0, 2.0], [1.0, 0.0, 1.0], [2.0, 1.0, 0.0]])
        coords = geo.weighted_mds(d, np.ones(3), k=1)
        xs = np.sort(coords.coords[:, 0])
        np.testing.assert_allclose(xs - xs[1], [-1.0, 0.0, 1.0], atol=1e-6)
        assert coords.stress < 1e-12

    def test_duplicated_point_with_halved_weight_changes_nothing(self):
        rng = np.random.default_rng(3)
        rows = rng.standard_normal((4, 6))
        base_d = geo.row_distances(rows)
        base = geo.weighted_mds(base_d, np.ones(4), k=2, tol=1e-14, max_iter=5000)
        doubled_rows = np.vstack([rows[:1], rows])
        doubled_d = geo.row_distances(doubled_rows)
        weights = np.array([0.5, 0.5, 1.0, 1.0, 1.0])
        doubled = geo.weighted_mds(doubled_d, weights, k=2, tol=1e-14, max_iter=5000)
        base_dist = geo.row_distances(base.coords[1:])
        doubled_dist = geo.row_distances(doubled.coords[2:])
        assert np.abs(base_dist - doubled_dist).max() < 1e-6

    def test_perfect_embedding_has_negligible_stress(self):
        rng = np.random.default_rng(4)
        points = rng.standard_normal((6, 5))
        d = geo.row_distances(points)
        coords = geo.weighted_mds(d, np.ones(6), k=5)
        assert coords.stress < 1e-8

    def test_permutation_invariance_of_distances(self):
        rng = np.random.default_rng(5)
        points = rng.standard_normal((7, 4))
        d = geo.row_distances(points)
        perm = np.array([3, 0, 6, 1, 5, 2, 4])
        coords_a = geo.weighted_mds(d, np.ones(7), k=2, tol=1e-13, max_iter=3000)
        coords_b = geo.weighted_mds(d[np.ix_(perm, perm)], np.ones(7), k=2,
                                    tol=1e-13, max_iter=3000)
        dist_a = geo.row_distances(coords_a.coords)[np.ix_(perm, perm)]
        dist_b = geo.row_distances(coords_b.coords)
        assert np.abs(dist_a - dist_b).max() < 1e-8

    def test_asymmetric_input_rejected(self):
        d = np.array([[0.0, 1.0], [2.0, 0.0]])
        with pytest.raises(ValueError):
            geo.weighted_mds(d, np.ones(2), k=1)

    def test_nonpositive_weight_rejected(self):
        d = np.zeros((2, 2))
        with pytest.raises(ValueError):
            geo.weighted_mds(d, np.array([1.0, 0.0]), k=1)

    def test_weighting_pulls_embedding_toward_heavy_points(self):
        # an inconsistent distance pattern embeds to favor high-weight pairs
        rng = np.random.default_rng(6)
        points = rng.standard_normal((6, 5))
        d = geo.row_distances(points)
        d_noisy = d + (rng.random((6, 6)) * 0.5)
        d_noisy = (d_noisy + d_noisy.T) / 2
        np.fill_diagonal(d_noisy, 0.0)
        weights = np.array([10.0, 10.0, 1.0, 1.0, 1.0, 1.0])
        heavy = geo.weighted_mds(d_noisy, weights, k=2, tol=1e-12, max_iter=3000)
        uniform = geo.weighted_mds(d_noisy, np.ones(6), k=2, tol=1e-12, max_iter=3000)
        err_heavy = abs(geo.row_distances(heavy.coords)[0, 1] - d_noisy[0, 1])
        err_uniform = abs(geo.row_distances(uniform.coords)[0, 1] - d_noisy[0, 1])
        assert err_heavy <= err_uniform + 1e-9


class TestScree:
    def test_identical_rows_degenerate(self):
        np.testing.assert_array_equal(geo.scree(np.ones((5, 4)), 3), np.zeros(3))

    def test_rank_one_rows(self):
        direction = np.array([1.0, 2.0, 3.0])
        m = np.outer(np.arange(6.0), direction)
        fractions = geo.scree(m, 3)
        assert fractions[0] == pytest.approx(1.0)
        np.testing.assert_allclose(fractions[1:], 0.0, atol=1e-12)

    def test_planted_rank_two(self):
        rng = np.random.default_rng(7)
        factors = rng.standard_normal((10, 2))
        loadings = rng.standard_normal((2, 10))
        m = factors @ loadings
        m += 0.01 * rng.standard_normal(m.shape) * m.std()
        fractions = geo.scree(m, 5)
        assert fractions[:2].sum() >= 0.9

    @given(seed=st.integers(0, 500))
    @settings(max_examples=40, deadline=None)
    def test_fractions_descending_and_bounded(self, seed):
        rng = np.random.default_rng(seed)
        m = rng.standard_normal((6, 6))
        fractions = geo.scree(m, 6)
        assert (fractions >= 0).all()
        assert (np.diff(fractions) <= 1e-12).all()
        assert fractions.sum() <= 1 + 1e-12


class TestOrient:
    def make_coords(self, values):
        values = np.asarray(values, dtype=float)
        return geo.EmbeddingCoords(
            coords=values, stress=0.0,
            dim_variances=np.full(values.shape[1], 1.0 / values.shape[1]),
            rep_ids=[f"r{i}" for i in range(values.shape[0])],
        )

    def test_flip_applied(self):
        coords = self.make_coords([[0.3, -0.2], [-0.1, 0.5]])
        oriented = geo.orient(coords, "r0", "negative")
        np.testing.assert_allclose(oriented.coords[:, 0], [-0.3, 0.1])
        np.testing.assert_allclose(oriented.coords[:, 1], [-0.2, 0.5])

    def test_already_oriented_unchanged(self):
        coords = self.make_coords([[-0.3, -0.2], [0.1, 0.5]])
        oriented = geo.orient(coords, "r0", "negative")
        np.testing.assert_array_equal(oriented.coords, coords.coords)

    def test_idempotent(self):
        coords = self.make_coords([[0.3, -0.2], [-0.1, 0.5]])
        once = geo.orient(coords, "r0", "negative")
        twice = geo.orient(once, "r0", "negative")
        np.testing.assert_array_equal(once.coords, twice.coords)

    def test_zero_anchor_dimension_left_alone(self, caplog):
        coords = self.make_coords([[0.0, 0.4], [1.0, -0.2]])
        with caplog.at_level("WARNING"):
            oriented = geo.orient(coords, "r0", "negative")
        np.testing.assert_array_equal(oriented.coords[:, 0], coords.coords[:, 0])
        np.testing.assert_allclose(oriented.coords[:, 1], [-0.4, 0.2])
        assert any("dimension 1" in r.message for r in caplog.records)

    def test_unknown_anchor(self):
        coords = self.make_coords([[1.0]])
        with pytest.raises(ValueError):
            geo.orient(coords, "nope", "negative")
