"""Contrastive losses, retrieval recall, and the CLUB MI bound."""

import math

import numpy as np
import pytest

from vqdiff.auxiliary import club_mi, contrastive_ranking_loss, info_nce, recall_at_k


class TestInfoNce:
    def test_uniform_similarity_is_log_n(self):
        for n in (1, 2, 5, 17):
            sim = np.full((n, n), 0.37)
            assert info_nce(sim, temperature=1.0) == pytest.approx(math.log(n), abs=1e-12)

    def test_identity_two_by_two(self):
        got = info_nce(np.eye(2), temperature=1.0)
        assert got == pytest.approx(math.log(1.0 + math.exp(-1.0)), abs=1e-12)
        assert got == pytest.approx(0.3133, abs=5e-5)

    def test_diagonal_dominance_saturates(self):
        losses = [info_nce(s * np.eye(8), temperature=1.0) for s in (1.0, 5.0, 20.0, 50.0)]
        assert all(b < a for a, b in zip(losses, losses[1:]))
        assert losses[-1] < 1e-3

    def test_temperature_sharpens(self):
        sim = np.eye(4)
        assert info_nce(sim, temperature=0.1) < info_nce(sim, temperature=1.0)

    def test_validation(self):
        with pytest.raises(ValueError, match="temperature"):
            info_nce(np.eye(2), temperature=0.0)
        with pytest.raises(ValueError, match="square"):
            info_nce(np.zeros((2, 3)))
        with pytest.raises(ValueError, match="finite"):
            info_nce(np.array([[np.inf, 0.0], [0.0, 1.0]]))

    def test_nonnegative(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            sim = rng.normal(size=(6, 6))
            assert info_nce(sim, temperature=0.7) >= 0.0


class TestRankingLoss:
    def test_satisfied_margins(self):
        sim = np.array([[1.0, 0.1, 0.2], [0.0, 1.0, 0.3], [0.1, 0.2, 1.0]])
        assert contrastive_ranking_loss(sim, margin=0.5) == 0.0

    def test_two_by_two_hand_case(self):
        # pair (0,1): max(0,.2-.5+.9)+max(0,.2-.6+.9)=0.6+0.5
        # pair (1,0): max(0,.2-.6+.1)+max(0,.2-.5+.1)=0+0
        sim = np.array([[0.5, 0.9], [0.1, 0.6]])
        assert contrastive_ranking_loss(sim, margin=0.2) == pytest.approx(0.55, abs=1e-12)

    def test_zero_margin_scaling(self):
        rng = np.random.default_rng(1)
        sim = rng.normal(size=(5, 5))
        base = contrastive_ranking_loss(sim, margin=0.0)
        assert contrastive_ranking_loss(3.0 * sim, margin=0.0) == pytest.approx(3.0 * base)

    def test_single_pair_has_no_negatives(self):
        assert contrastive_ranking_loss(np.array([[2.0]]), margin=1.0) == 0.0

    def test_negative_margin_rejected(self):
        with pytest.raises(ValueError, match="margin"):
            contrastive_ranking_loss(np.eye(2), margin=-0.1)


class TestRecallAtK:
    def test_perfect_retrieval(self):
        sim = np.eye(5) + 0.01
        assert recall_at_k(sim, 1) == 100.0

    def test_crafted_75_at_2(self):
        sim = np.array(
            [
                [1.0, 0.0, 0.0, 0.0],   # rank 1
                [0.9, 0.5, 0.0, 0.0],   # rank 2
                [0.9, 0.8, 0.5, 0.0],   # rank 3 -> missed at k=2
                [0.0, 0.0, 0.0, 1.0],   # rank 1
            ]
        )
        assert recall_at_k(sim, 1) == 50.0
        assert recall_at_k(sim, 2) == 75.0
        assert recall_at_k(sim, 3) == 100.0

    def test_ties_break_by_candidate_index(self):
        sim = np.array([[1.0, 1.0], [1.0, 1.0]])
        # row 0: diagonal at index 0 wins its tie; row 1: index 0 outranks
        assert recall_at_k(sim, 1) == 50.0
        assert recall_at_k(sim, 2) == 100.0

    def test_monotone_in_k_and_full_recall_at_n(self):
        rng = np.random.default_rng(2)
        sim = rng.normal(size=(8, 8))
        values = [recall_at_k(sim, k) for k in range(1, 9)]
        assert all(b >= a for a, b in zip(values, values[1:]))
        assert values[-1] == 100.0

    def test_invariant_under_increasing_transform(self):
        rng = np.random.default_rng(3)
        sim = rng.normal(size=(7, 7))
        for k in (1, 3, 7):
            assert recall_at_k(sim, k) == recall_at_k(np.exp(sim), k)

    def test_k_range(self):
        with pytest.raises(ValueError, match="k must be"):
            recall_at_k(np.eye(3), 0)
        with pytest.raises(ValueError, match="k must be"):
            recall_at_k(np.eye(3), 4)


class TestPermutationEquivariance:
    def test_losses_unchanged_by_joint_relabeling(self):
        rng = np.random.default_rng(4)
        sim = rng.normal(size=(6, 6))
        perm = rng.permutation(6)
        permuted = sim[np.ix_(perm, perm)]
        assert info_nce(permuted, 0.5) == pytest.approx(info_nce(sim, 0.5), abs=1e-12)
        assert contrastive_ranking_loss(permuted, 0.3) == pytest.approx(
            contrastive_ranking_loss(sim, 0.3), abs=1e-12
        )
        for k in (1, 2, 6):
            assert recall_at_k(permuted, k) == recall_at_k(sim, k)


class TestClubMi:
    def test_independent_gaussians_near_zero(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=10_000)
        y = rng.normal(size=10_000)
        assert abs(club_mi(x, y)) < 0.05

    def test_correlated_gaussians_upper_bound(self):
        rng = np.random.default_rng(6)
        rho = 0.9
        x = rng.normal(size=10_000)
        y = rho * x + math.sqrt(1.0 - rho**2) * rng.normal(size=10_000)
        true_mi = -0.5 * math.log(1.0 - rho**2)
        est = club_mi(x, y)
        assert est >= true_mi - 0.05
        # with the exact Gaussian conditional the population value of the
        # bound is E_indep[(y-rho*x)^2]/(2*sigma^2) - 1/2 = rho^2/(1-rho^2)
        assert est == pytest.approx(rho**2 / (1.0 - rho**2), abs=0.3)

    def test_perfect_dependence_large_finite(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=500)
        with pytest.warns(RuntimeWarning, match="residual variance"):
            est = club_mi(x, x)
        assert np.isfinite(est)
        assert est > 10.0

    def test_multivariate_dependence_positive(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(2000, 3))
        y = x @ rng.normal(size=(3, 2)) + 0.5 * rng.normal(size=(2000, 2))
        assert club_mi(x, y) > 0.5

    def test_sample_size_precondition(self):
        rng = np.random.default_rng(9)
        with pytest.raises(ValueError, match="at least 20"):
            club_mi(rng.normal(size=19), rng.normal(size=19))
        with pytest.raises(ValueError, match="at least 40"):
            club_mi(rng.normal(size=(39, 3)), rng.normal(size=39))

    def test_misaligned_samples(self):
        with pytest.raises(ValueError, match="aligned"):
            club_mi(np.zeros((30, 1)), np.zeros((29, 1)))
