import numpy as np
import pytest
from sklearn.base import clone

from ezgzl.ceo import (
    CeoConfig,
    ClassEmbeddingOptimizer,
    DegeneratePairWarning,
    enumerate_triplets,
    joint_objective,
    loss_semantic_proximity,
    loss_semantic_rank,
    loss_separability,
    nearest_neighbor_report,
    optimize_class_embeddings,
    pairwise_distances,
    render_nn_report,
    resolve_triplet_budget,
    sample_triplets,
)
from ezgzl.numerics import finite_diff_check
from ezgzl.store import EmbeddingBank

from conftest import clustered_bank, unit_rows


def angles_to_unit(angles):
    a = np.asarray(angles, dtype=np.float64)
    return np.stack([np.cos(a), np.sin(a)], axis=1)


class TestPairwiseDistances:
    def test_orthonormal_oracle(self):
        w = np.eye(3)[:2]
        assert pairwise_distances(w, "euclidean")[0, 1] == pytest.approx(np.sqrt(2))
        assert pairwise_distances(w, "cosine")[0, 1] == pytest.approx(1.0)
        assert pairwise_distances(w, "manhattan")[0, 1] == pytest.approx(2.0)

    @pytest.mark.parametrize("metric", ["euclidean", "cosine", "manhattan"])
    def test_symmetric_zero_diagonal_nonnegative(self, rng, metric):
        w = unit_rows(rng, 6, 5)
        d = pairwise_distances(w, metric)
        np.testing.assert_allclose(d, d.T, atol=1e-15)
        np.testing.assert_array_equal(np.diag(d), 0.0)
        assert np.all(d >= 0.0)

    def test_unknown_metric(self, rng):
        with pytest.raises(ValueError, match="metric"):
            pairwise_distances(unit_rows(rng, 3, 3), "chebyshev")


class TestSeparability:
    def test_antipodal_pair_oracle(self):
        w = np.array([[1.0, 0.0], [-1.0, 0.0]])
        value, _ = loss_separability(w, "euclidean")
        assert value == pytest.approx(-4.0)

    def test_orthonormal_triple_oracle(self):
        value, _ = loss_separability(np.eye(3), "euclidean")
        assert value == pytest.approx(-3.0 * np.sqrt(2.0))

    @pytest.mark.parametrize("metric", ["euclidean", "cosine", "manhattan"])
    def test_gradient_matches_finite_differences(self, rng, metric):
        w = unit_rows(rng, 5, 6)
        _, grad = loss_separability(w, metric)

        def f(flat):
            return loss_separability(flat.reshape(5, 6), metric)[0]

        report = finite_diff_check(f, grad.ravel(), w.ravel())
        assert report.max_relative_error <= 1e-4

    def test_coincident_pair_warns(self):
        w = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        with pytest.warns(DegeneratePairWarning):
            value, grad = loss_separability(w, "euclidean")
        assert np.all(np.isfinite(grad))
        assert value == pytest.approx(-np.sqrt(2.0))


class TestSemanticProximity:
    def test_oracle_value_and_gradient(self):
        w = np.array([[1.0, 0.0]])
        t = np.array([[0.7, 0.4]])
        value, grad = loss_semantic_proximity(w, t)
        assert value == pytest.approx(0.5)
        np.testing.assert_allclose(grad, [[0.6, -0.8]])

    def test_coincident_rows_zero_subgradient(self, rng):
        w = unit_rows(rng, 3, 4)
        value, grad = loss_semantic_proximity(w, w)
        assert value == 0.0
        np.testing.assert_array_equal(grad, 0.0)

    def test_gradient_matches_finite_differences(self, rng):
        w = unit_rows(rng, 4, 5)
        t = unit_rows(rng, 4, 5)
        _, grad = loss_semantic_proximity(w, t)
        report = finite_diff_check(
            lambda flat: loss_semantic_proximity(flat.reshape(4, 5), t)[0],
            grad.ravel(),
            w.ravel(),
        )
        assert report.max_relative_error <= 1e-4


class TestTriplets:
    def test_enumeration_count_and_distinctness(self):
        trips = enumerate_triplets(5)
        assert trips.shape == (5 * 4 * 3, 3)
        c, i, j = trips.T
        assert np.all((c != i) & (c != j) & (i != j))
        assert len({tuple(row) for row in trips}) == trips.shape[0]

    def test_sampling_respects_budget_and_validity(self, rng):
        trips = sample_triplets(9, 40, rng)
        assert trips.shape == (40, 3)
        c, i, j = trips.T
        assert trips.min() >= 0 and trips.max() < 9
        assert np.all((c != i) & (c != j) & (i != j))
        assert len({tuple(row) for row in trips}) == 40

    def test_sampling_covers_index_space(self):
        # with the budget equal to the population, every triple appears
        rng = np.random.default_rng(0)
        trips = sample_triplets(5, 60, rng)
        full = {tuple(row) for row in enumerate_triplets(5)}
        assert {tuple(row) for row in trips} == full

    def test_sampling_deterministic(self):
        a = sample_triplets(10, 50, np.random.default_rng(3))
        b = sample_triplets(10, 50, np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)

    def test_budget_resolution(self):
        assert resolve_triplet_budget(CeoConfig(triplet_budget=17), 100) == 17
        assert resolve_triplet_budget(CeoConfig(), 20) is None
        assert resolve_triplet_budget(CeoConfig(), 100) == 50_000


class TestSemanticRank:
    def test_single_triplet_oracles(self):
        # initial embeddings rank class 1 closer to class 0 than class 2
        t = angles_to_unit([0.0, np.arccos(0.8), np.arccos(0.5)])
        trip = np.array([[0, 1, 2]])
        # ordering satisfied with slack 0.5 beyond the margin: zero loss
        w_ok = angles_to_unit([0.0, np.arccos(0.9), np.arccos(-0.6)])
        value, grad = loss_semantic_rank(w_ok, t, 1.0, "cosine", triplets=trip)
        assert value == 0.0
        np.testing.assert_array_equal(grad, 0.0)
        # ordering satisfied but short of the margin by 0.6
        w_short = angles_to_unit([0.0, np.arccos(0.7), np.arccos(0.3)])
        value, _ = loss_semantic_rank(w_short, t, 1.0, "cosine", triplets=trip)
        assert value == pytest.approx(0.6)

    def test_tied_initial_distances_skipped(self):
        # classes 1 and 2 are equidistant from class 0 in the anchors
        t = angles_to_unit([0.0, 0.5, -0.5])
        w = angles_to_unit([0.0, 1.2, -0.3])
        value, grad = loss_semantic_rank(w, t, 1.0, "cosine", triplets=[[0, 1, 2]])
        assert value == 0.0
        np.testing.assert_array_equal(grad, 0.0)

    def test_invalid_triplets_rejected(self, rng):
        w = unit_rows(rng, 4, 3)
        with pytest.raises(ValueError, match="distinct"):
            loss_semantic_rank(w, w, 1.0, "cosine", triplets=[[0, 0, 1]])
        with pytest.raises(ValueError, match="out of range"):
            loss_semantic_rank(w, w, 1.0, "cosine", triplets=[[0, 1, 9]])

    @pytest.mark.parametrize("metric", ["euclidean", "cosine", "manhattan"])
    def test_gradient_matches_finite_differences(self, rng, metric):
        w = unit_rows(rng, 5, 6)
        t = unit_rows(rng, 5, 6)
        trips = enumerate_triplets(5)
        _, grad = loss_semantic_rank(w, t, 1.0, metric, triplets=trips)

        def f(flat):
            return loss_semantic_rank(
                flat.reshape(5, 6), t, 1.0, metric, triplets=trips
            )[0]

        report = finite_diff_check(f, grad.ravel(), w.ravel())
        assert report.max_relative_error <= 1e-4


class TestJointObjective:
    def test_alpha_endpoints_match_single_losses(self, rng):
        w = unit_rows(rng, 5, 6)
        t = unit_rows(rng, 5, 6)
        sep = CeoConfig(alpha=1.0)
        v, g = joint_objective(w, t, sep)
        v_ref, g_ref = loss_separability(w, "cosine")
        assert v == v_ref
        np.testing.assert_array_equal(g, g_ref)
        sem = CeoConfig(alpha=0.0, sem_loss="proximity")
        v, g = joint_objective(w, t, sem)
        v_ref, g_ref = loss_semantic_proximity(w, t)
        assert v == v_ref
        np.testing.assert_array_equal(g, g_ref)

    def test_convex_combination(self, rng):
        w = unit_rows(rng, 5, 6)
        t = unit_rows(rng, 5, 6)
        cfg = CeoConfig(alpha=0.3, sem_loss="proximity", metric="euclidean")
        v, _ = joint_objective(w, t, cfg)
        sem, _ = loss_semantic_proximity(w, t)
        sep, _ = loss_separability(w, "euclidean")
        assert v == pytest.approx(0.7 * sem + 0.3 * sep)

    def test_gradient_matches_finite_differences(self, rng):
        w = unit_rows(rng, 5, 6)
        t = unit_rows(rng, 5, 6)
        cfg = CeoConfig(alpha=0.5, sem_loss="rank", metric="cosine")
        trips = enumerate_triplets(5)
        _, grad = joint_objective(w, t, cfg, triplets=trips)
        report = finite_diff_check(
            lambda flat: joint_objective(
                flat.reshape(5, 6), t, cfg, triplets=trips
            )[0],
            grad.ravel(),
            w.ravel(),
        )
        assert report.max_relative_error <= 1e-4

    def test_invalid_config_rejected(self, rng):
        w = unit_rows(rng, 3, 4)
        with pytest.raises(ValueError, match="alpha"):
            joint_objective(w, w, CeoConfig(alpha=1.5))


def brute_force_kendall_tau(x, y):
    """Quadratic tau-b over all index pairs."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.size
    conc = disc = ties_x = ties_y = 0
    for a in range(n):
        for b in range(a + 1, n):
            dx = x[a] - x[b]
            dy = y[a] - y[b]
            if dx == 0.0:
                ties_x += 1
            if dy == 0.0:
                ties_y += 1
            if dx * dy > 0.0:
                conc += 1
            elif dx * dy < 0.0:
                disc += 1
    n0 = n * (n - 1) // 2
    return (conc - disc) / np.sqrt((n0 - ties_x) * (n0 - ties_y))


class TestOptimize:
    def test_two_antipodal_fixed_point(self):
        bank = EmbeddingBank(("a", "b"), np.array([[1.0, 0.0], [-1.0, 0.0]]))
        cfg = CeoConfig(alpha=1.0, metric="euclidean", steps=10, lr=0.1)
        result = optimize_class_embeddings(bank, cfg)
        assert not result.diverged
        assert result.min_distance_after == pytest.approx(2.0)

    def test_unit_rows_trace_and_determinism(self):
        bank = clustered_bank(seed=5, n_classes=8, dim=6)
        cfg = CeoConfig(alpha=0.5, sem_loss="rank", steps=40, lr=0.02, seed=1)
        r1 = optimize_class_embeddings(bank, cfg)
        r2 = optimize_class_embeddings(bank, cfg)
        assert np.array_equal(r1.optimized, r2.optimized)
        assert r1.loss_trace.shape == (40, 3)
        norms = np.linalg.norm(r1.optimized, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-12)
        assert not r1.diverged

    def test_reported_tau_matches_brute_force(self):
        bank = clustered_bank(seed=9, n_classes=7, dim=5)
        cfg = CeoConfig(alpha=0.7, sem_loss="proximity", steps=30, lr=0.05)
        result = optimize_class_embeddings(bank, cfg)
        d_t = pairwise_distances(bank.initial, "cosine")
        d_w = pairwise_distances(result.optimized, "cosine")
        iu = np.triu_indices(bank.n_classes, k=1)
        expected = brute_force_kendall_tau(d_t[iu], d_w[iu])
        assert result.kendall_tau == pytest.approx(expected, abs=1e-12)

    def test_min_distance_before_matches_initial(self):
        bank = clustered_bank(seed=3, n_classes=6, dim=5)
        cfg = CeoConfig(alpha=1.0, steps=5, lr=0.01)
        result = optimize_class_embeddings(bank, cfg)
        d = pairwise_distances(bank.initial, "cosine")
        np.fill_diagonal(d, np.inf)
        assert result.min_distance_before == pytest.approx(float(d.min()))

    def test_separability_only_grows_min_distance(self):
        bank = clustered_bank(seed=11, n_classes=10, dim=8)
        cfg = CeoConfig(alpha=1.0, metric="cosine", steps=300, lr=0.02)
        result = optimize_class_embeddings(bank, cfg)
        assert result.min_distance_after > result.min_distance_before


class TestNearestNeighborReport:
    def make_bank(self):
        init = angles_to_unit([0.0, 0.2, 1.5])
        opt = angles_to_unit([0.0, 2.0, 4.0])
        return EmbeddingBank(("mid", "near", "far"), init, opt)

    def test_rows_sorted_and_correct(self):
        rows = nearest_neighbor_report(self.make_bank())
        assert [r["base_class"] for r in rows] == ["far", "mid", "near"]
        by_name = {r["base_class"]: r for r in rows}
        assert by_name["mid"]["nn_initial"] == "near"
        assert by_name["mid"]["d_initial"] == pytest.approx(1 - np.cos(0.2))

    def test_requires_optimized(self, rng):
        bank = EmbeddingBank(("a", "b"), unit_rows(rng, 2, 3))
        with pytest.raises(ValueError, match="optimized"):
            nearest_neighbor_report(bank)

    def test_render_contains_headers_and_rows(self):
        text = render_nn_report(nearest_neighbor_report(self.make_bank()))
        assert "base class" in text
        assert "NN (w/o opt)" in text and "NN (w opt)" in text
        assert "far" in text and "near" in text


class TestEstimator:
    def test_fit_transform_round_trip(self):
        bank = clustered_bank(seed=2, n_classes=6, dim=5)
        est = ClassEmbeddingOptimizer(steps=20, lr=0.02, seed=0)
        out = est.fit_transform(bank.initial)
        ref = optimize_class_embeddings(bank, est._config())
        np.testing.assert_allclose(out, ref.optimized, atol=1e-12)

    def test_transform_rejects_other_input(self, rng):
        x = unit_rows(rng, 5, 4)
        est = ClassEmbeddingOptimizer(steps=5).fit(x)
        with pytest.raises(ValueError, match="same embedding matrix"):
            est.transform(unit_rows(rng, 5, 4))

    def test_unfitted_transform_rejected(self, rng):
        with pytest.raises(ValueError, match="not fitted"):
            ClassEmbeddingOptimizer().transform(unit_rows(rng, 3, 3))

    def test_get_params_and_clone(self):
        est = ClassEmbeddingOptimizer(alpha=0.25, steps=7, metric="euclidean")
        params = est.get_params()
        assert params["alpha"] == 0.25 and params["steps"] == 7
        twin = clone(est)
        assert twin.get_params() == params
