"""
Tests for modelsel.py - Cross-validated penalized likelihood
"""
import os
import sys
from unittest.mock import patch

import numpy as np
import pytest

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from errors import DimensionMismatch, ValidationError
from evalgen import ar_covariance
from matnorm import ComponentParams, matnorm_sample
from mixture import FitConfig, PenaltyKind, PenaltySpec, fit_em, observed_loglik, penalty_value
from modelsel import CvplConfig, CvplRow, CvplTable, _splits, cvpl_grid, cvpl_score, grid_to_csv, select_k


@pytest.fixture
def population():
    """One matrix-normal population, 40 samples of 3 x 3"""
    theta = ComponentParams(M=np.ones((3, 3)), U=ar_covariance(3, 0.5), V=ar_covariance(3, 0.5))
    return matnorm_sample(theta, 40, seed=9)


@pytest.fixture
def grouped():
    """Three well separated groups of 12 samples, 3 x 3"""
    gen = np.random.default_rng(21)
    return np.concatenate([offset + gen.standard_normal((12, 3, 3)) for offset in (0.0, 30.0, 60.0)])


@pytest.fixture
def fast_cfg():
    return FitConfig(max_iter=30, n_starts=1, seed=2)


class TestCvplConfig:
    """Tests for CvplConfig validation"""

    def test_defaults(self):
        """Five folds over k = 1..4"""
        sel = CvplConfig()
        assert sel.folds == 5
        assert sel.k_values == [1, 2, 3, 4]

    def test_k_values_sorted_unique(self):
        """Candidate list is normalized"""
        assert CvplConfig(k_values=(3, 1, 3)).k_values == [1, 3]

    def test_bad_holdout(self):
        """Holdout fraction must lie in (0, 1)"""
        with pytest.raises(ValidationError):
            CvplConfig(holdout=1.0)

    def test_bad_folds(self):
        """At least two folds"""
        with pytest.raises(ValidationError):
            CvplConfig(folds=1)

    def test_k_values_positive(self):
        """k = 0 is not a candidate"""
        with pytest.raises(ValidationError):
            CvplConfig(k_values=(0, 1))


class TestSplits:
    """Tests for _splits"""

    def test_folds_partition(self):
        """Test sets are disjoint and cover every sample"""
        pairs = list(_splits(23, CvplConfig(folds=5), seed=1))
        assert len(pairs) == 5
        tests = np.concatenate([test for _, test in pairs])
        assert sorted(tests.tolist()) == list(range(23))
        for train, test in pairs:
            assert not set(train.tolist()) & set(test.tolist())
            assert len(train) + len(test) == 23

    def test_holdout(self):
        """Holdout gives one split of the requested size"""
        pairs = list(_splits(40, CvplConfig(holdout=0.25), seed=1))
        assert len(pairs) == 1
        train, test = pairs[0]
        assert (len(train), len(test)) == (30, 10)

    def test_too_many_folds(self):
        """More folds than samples is refused"""
        with pytest.raises(ValidationError):
            list(_splits(3, CvplConfig(folds=5), seed=0))


class TestCvplScore:
    """Tests for cvpl_score"""

    def test_unpenalized_single_component(self, population, fast_cfg):
        """k=1, lambda=0 is the average held-out log-likelihood"""
        train, test = population[:30], population[30:]
        report = fit_em(train, 1, PenaltySpec(), fast_cfg)
        expected = observed_loglik(test, report.model) / 10
        assert cvpl_score(train, test, 1, PenaltySpec(), fast_cfg) == pytest.approx(expected, abs=1e-10)

    def test_penalty_at_train_means(self, population, fast_cfg):
        """The penalty uses the means fitted on the training part"""
        train, test = population[:30], population[30:]
        penalty = PenaltySpec(PenaltyKind.L1, 0.5)
        report = fit_em(train, 1, penalty, fast_cfg)
        expected = (observed_loglik(test, report.model) - 0.5 * penalty_value(report.model.means, penalty)) / 10
        assert cvpl_score(train, test, 1, penalty, fast_cfg) == pytest.approx(expected, abs=1e-10)

    def test_duplicate_test_set(self, population, fast_cfg):
        """Repeating every test sample leaves the average unchanged"""
        train, test = population[:30], population[30:]
        once = cvpl_score(train, test, 1, PenaltySpec(), fast_cfg)
        twice = cvpl_score(train, np.concatenate([test, test]), 1, PenaltySpec(), fast_cfg)
        assert twice == pytest.approx(once, rel=1e-12, abs=1e-12)

    def test_test_set_order_irrelevant(self, population, fast_cfg):
        """Shuffling the held-out samples leaves the score unchanged"""
        train, test = population[:30], population[30:]
        penalty = PenaltySpec(PenaltyKind.L1, 0.5)
        shuffled = test[np.random.default_rng(4).permutation(len(test))]
        assert cvpl_score(train, shuffled, 1, penalty, fast_cfg) == \
            pytest.approx(cvpl_score(train, test, 1, penalty, fast_cfg), rel=1e-12, abs=1e-12)

    def test_shape_mismatch(self, population, fast_cfg):
        """Train and test must share r x p"""
        with pytest.raises(DimensionMismatch):
            cvpl_score(population, np.zeros((4, 2, 3)), 1, PenaltySpec(), fast_cfg)


class TestSelectK:
    """Tests for select_k"""

    def test_singleton_candidate(self, grouped, fast_cfg):
        """k_values={3} selects 3"""
        table = select_k(grouped, PenaltySpec(), CvplConfig(k_values=(3,), holdout=0.25), fast_cfg)
        assert table.selected_k == 3
        assert [row.k for row in table.rows] == [3]

    def test_ties_go_to_smaller_k(self, population, fast_cfg):
        """Equal CVPL picks the smallest k"""
        with patch("modelsel.cvpl_score", return_value=-1.0):
            table = select_k(population, PenaltySpec(), CvplConfig(k_values=(2, 1, 3)), fast_cfg)
        assert table.selected_k == 1
        assert all(row.stderr == 0.0 for row in table.rows)

    def test_best_mean_wins(self, population, fast_cfg):
        """Highest mean CVPL is selected"""
        def fake_score(train, test, k, penalty, cfg):
            return {1: -5.0, 2: -1.0, 3: -3.0}[k]

        with patch("modelsel.cvpl_score", side_effect=fake_score):
            table = select_k(population, PenaltySpec(), CvplConfig(k_values=(1, 2, 3)), fast_cfg)
        assert table.selected_k == 2

    def test_replicates_multiply_scores(self, population, fast_cfg):
        """Each replicate contributes one score per fold"""
        with patch("modelsel.cvpl_score", return_value=0.0):
            table = select_k(population, PenaltySpec(), CvplConfig(k_values=(1,), folds=4, replicates=3), fast_cfg)
        assert len(table.rows[0].scores) == 12

    def test_small_training_split(self, fast_cfg, rng):
        """Training folds need at least 2 * max k samples"""
        with pytest.raises(ValidationError):
            select_k(rng.standard_normal((6, 2, 2)), PenaltySpec(), CvplConfig(k_values=(1, 3), folds=2), fast_cfg)

    def test_deterministic(self, grouped, fast_cfg):
        """Fixed seeds reproduce the table"""
        sel = CvplConfig(k_values=(1, 3), folds=3, seed=4)
        a = select_k(grouped, PenaltySpec(), sel, fast_cfg)
        b = select_k(grouped, PenaltySpec(), sel, fast_cfg)
        assert a.to_csv() == b.to_csv()

    @pytest.mark.slow
    def test_single_population_prefers_one_cluster(self):
        """One population selects k=1 in most replicates"""
        theta = ComponentParams(M=np.zeros((3, 3)), U=ar_covariance(3, 0.5), V=ar_covariance(3, 0.5))
        cfg = FitConfig(max_iter=50, n_starts=1)
        picks = []
        for rep in range(20):
            stack = matnorm_sample(theta, 60, seed=100 + rep)
            picks.append(select_k(stack, PenaltySpec(), CvplConfig(k_values=(1, 2), seed=rep), cfg).selected_k)
        assert picks.count(1) > 10


class TestCsvOutput:
    """Tests for CvplTable.to_csv and grid_to_csv"""

    def test_table_csv(self):
        """Header plus one row per k with the selection flag"""
        table = CvplTable(rows=[CvplRow("l1", 0.5, 2, -1.5, 0.25), CvplRow("l1", 0.5, 3, -2.0, 0.5)],
                          selected_k=2)
        assert table.to_csv().splitlines() == [
            "penalty,lambda,k,cvpl_mean,cvpl_stderr,selected",
            "l1,0.5,2,-1.5,0.25,1",
            "l1,0.5,3,-2.0,0.5,0",
        ]

    def test_grid_single_header(self, population, fast_cfg):
        """A grid concatenates tables under one header"""
        penalties = [PenaltySpec(PenaltyKind.L1, lam) for lam in (0.5, 1.0)]
        with patch("modelsel.cvpl_score", return_value=0.0):
            tables = cvpl_grid(population, penalties, CvplConfig(k_values=(1, 2)), fast_cfg)
        lines = grid_to_csv(tables).splitlines()
        assert len(tables) == 2
        assert lines[0].startswith("penalty,")
        assert len(lines) == 5
        assert sum(line.startswith("penalty,") for line in lines) == 1

    def test_empty_grid(self):
        """No tables, no output"""
        assert grid_to_csv([]) == ""
