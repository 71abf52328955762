"""
Tests for experiments.py - Replicate studies and amplitude calibration
"""
import csv
import io
import os
import sys
from dataclasses import replace
from unittest.mock import patch

import numpy as np
import pytest

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from errors import NumericFailure, ValidationError
from evalgen import ScenarioSpec
from experiments import (
    ComparisonResult,
    MethodScores,
    SelectionCell,
    calibrate_amplitude,
    comparison_study,
    comparison_to_csv,
    kmeans_ari,
    selection_study,
)
from mixture import FitConfig, PenaltyKind, PenaltySpec, fit_em
from modelsel import CvplConfig, CvplTable


@pytest.fixture
def easy_scenario():
    """Small, strongly separated square/cross data"""
    return ScenarioSpec.from_name("III", n=40, r=6, p=6, rho=0.5, mean_amplitude=5.0, seed=3)


@pytest.fixture
def fast_cfg():
    return FitConfig(max_iter=30, n_starts=1)


class TestSelectionStudy:
    """Tests for selection_study"""

    def test_counts_per_penalty(self, easy_scenario, fast_cfg):
        """Every replicate adds one selection per penalty setting"""
        penalties = [PenaltySpec(PenaltyKind.L1, 0.5), PenaltySpec(PenaltyKind.NUCLEAR, 1.0)]
        with patch("experiments.select_k", return_value=CvplTable(rows=[], selected_k=2)):
            cells = selection_study(easy_scenario, penalties, k_values=(2, 3), replicates=4, cfg=fast_cfg)
        assert [c.kind for c in cells] == ["l1", "nuclear"]
        for cell in cells:
            assert cell.replicates == 4
            assert cell.counts == {2: 4}
            assert cell.frequency(2) == 1.0
            assert cell.frequency(3) == 0.0

    def test_zero_lambda_reported_as_none(self, easy_scenario, fast_cfg):
        """A zero-strength penalty is labelled none"""
        with patch("experiments.select_k", return_value=CvplTable(rows=[], selected_k=2)):
            cells = selection_study(easy_scenario, [PenaltySpec(PenaltyKind.L2, 0.0)], replicates=1, cfg=fast_cfg)
        assert (cells[0].kind, cells[0].lam) == ("none", 0.0)

    def test_real_selection(self, easy_scenario, fast_cfg):
        """Separated clusters pick k=2 over k=1"""
        cells = selection_study(easy_scenario, [PenaltySpec()], k_values=(1, 2), replicates=2,
                                sel=CvplConfig(folds=2), cfg=fast_cfg)
        assert sum(cells[0].counts.values()) == 2
        assert cells[0].frequency(2) == 1.0

    def test_replicates_positive(self, easy_scenario):
        """At least one replicate"""
        with pytest.raises(ValidationError):
            selection_study(easy_scenario, [PenaltySpec()], replicates=0)


class TestComparisonStudy:
    """Tests for comparison_study"""

    def test_scores_recorded(self, easy_scenario, fast_cfg):
        """Both methods are scored on every replicate"""
        result = comparison_study(easy_scenario, PenaltySpec(PenaltyKind.L1, 0.5), replicates=3, cfg=fast_cfg)
        assert result.failures == 0
        assert len(result.method.ari) == 3
        assert len(result.kmeans.accuracy) == 3
        assert np.mean(result.kmeans.ari) == 1.0
        assert np.mean(result.method.ari) >= 0.9
        assert result.method.name == "l1:0.5"

    def test_failed_fits_counted(self, easy_scenario, fast_cfg):
        """All fits failing is itself a numeric failure"""
        with patch("experiments.fit_em", side_effect=NumericFailure("boom")):
            with pytest.raises(NumericFailure):
                comparison_study(easy_scenario, PenaltySpec(), replicates=2, cfg=fast_cfg)


class TestCalibrateAmplitude:
    """Tests for calibrate_amplitude"""

    def test_first_amplitude_in_band(self, easy_scenario):
        """Grid is scanned in increasing order"""
        with patch("experiments.kmeans_ari", side_effect=[0.1, 0.5, 0.9]) as fake:
            amplitude, ari = calibrate_amplitude(easy_scenario, [3.0, 1.0, 2.0])
        assert (amplitude, ari) == (2.0, 0.5)
        assert fake.call_count == 2

    def test_no_amplitude_in_band(self, easy_scenario):
        """Missing the band is a validation error listing what was tried"""
        with patch("experiments.kmeans_ari", side_effect=[0.0, 1.0]):
            with pytest.raises(ValidationError, match="target band"):
                calibrate_amplitude(easy_scenario, [0.5, 4.0])

    def test_strong_signal_is_easy(self, easy_scenario):
        """Large amplitude gives perfect k-means recovery"""
        assert kmeans_ari(easy_scenario, replicates=2) == 1.0


class TestComparisonCsv:
    """Tests for comparison_to_csv and MethodScores"""

    def test_summary(self):
        """Mean and spread of each metric"""
        scores = MethodScores(name="x", ari=[0.5, 1.0], accuracy=[0.75, 1.0])
        ari_m, ari_s, acc_m, acc_s = scores.summary()
        assert (ari_m, ari_s) == (0.75, 0.25)
        assert (acc_m, acc_s) == (0.875, 0.125)

    def test_kmeans_row_once(self):
        """The baseline row appears once, before the penalized rows"""
        kmeans = MethodScores(name="kmeans", ari=[0.5], accuracy=[0.8])
        results = [
            ComparisonResult(PenaltySpec(PenaltyKind.L1, lam), MethodScores("l1", [0.9], [0.95]), kmeans)
            for lam in (0.5, 1.5)
        ]
        lines = comparison_to_csv(results).splitlines()
        assert lines[0] == "method,lambda,ari_mean,ari_sd,accuracy_mean,accuracy_sd,replicates"
        assert lines[1] == "kmeans,0.0,0.5000,0.0000,0.8000,0.0000,1"
        assert lines[2].startswith("l1,0.5,")
        assert lines[3].startswith("l1,1.5,")
        assert len(lines) == 4

    def test_selection_cell_frequency(self):
        """Frequencies are counts over replicates"""
        cell = SelectionCell(kind="l1", lam=1.0, counts={2: 3, 3: 1}, replicates=4)
        assert cell.frequency(2) == 0.75

    def test_comparison_csv_parses(self):
        """Every row reads back as seven fields"""
        kmeans = MethodScores(name="kmeans", ari=[0.5, 0.7], accuracy=[0.8, 0.9])
        result = ComparisonResult(PenaltySpec(PenaltyKind.NUCLEAR, 1.0), MethodScores("n", [0.9, 1.0], [0.95, 1.0]),
                                  kmeans, failures=1)
        rows = list(csv.reader(io.StringIO(comparison_to_csv([result]))))
        assert [len(row) for row in rows] == [7, 7, 7]
        assert rows[2][:2] == ["nuclear", "1.0"]
        assert rows[2][-1] == "2"


class TestStudyFailures:
    """Numeric failures inside the replicate loops"""

    def test_failed_selection_counted(self, easy_scenario, fast_cfg):
        """A breakdown in one cell is recorded, the study carries on"""
        table = CvplTable(rows=[], selected_k=2)
        penalties = [PenaltySpec(PenaltyKind.L2, 0.5), PenaltySpec(PenaltyKind.NUCLEAR, 1.0)]
        side_effect = [NumericFailure("cluster mass below 1e-08", component=1), table, table, table]
        with patch("experiments.select_k", side_effect=side_effect):
            cells = selection_study(easy_scenario, penalties, k_values=(2, 3), replicates=2, cfg=fast_cfg)
        l2, nuclear = cells
        assert (l2.replicates, l2.failures, l2.counts) == (2, 1, {2: 1})
        assert l2.frequency(2) == 0.5
        assert (nuclear.replicates, nuclear.failures, nuclear.counts) == (2, 0, {2: 2})

    def test_some_fits_failing(self, easy_scenario, fast_cfg):
        """Failed replicates are counted and left out of the scores"""
        real = fit_em
        calls = []

        def fail_first(*args, **kwargs):
            calls.append(1)
            if len(calls) == 1:
                raise NumericFailure("penalized mean update diverged")
            return real(*args, **kwargs)

        with patch("experiments.fit_em", side_effect=fail_first):
            result = comparison_study(easy_scenario, PenaltySpec(), replicates=3, cfg=fast_cfg)
        assert result.failures == 1
        assert len(result.method.ari) == 2
        assert len(result.kmeans.ari) == 3


@pytest.mark.slow
class TestDeskScaleStudies:
    """Replicate studies at desk scale (run with --runslow)"""

    AMPLITUDES = [round(0.5 + 0.1 * i, 1) for i in range(21)]

    def test_scenario_iii_comparison(self):
        """Calibrated k-means sits in the band; the unpenalized mixture beats it; L1 completes"""
        scenario = ScenarioSpec.from_name("III", seed=11)
        amplitude, ari = calibrate_amplitude(scenario, self.AMPLITUDES, replicates=20)
        assert 0.4 <= ari <= 0.65

        calibrated = replace(scenario, mean_amplitude=amplitude)
        plain = comparison_study(calibrated, PenaltySpec(), replicates=20)
        assert np.mean(plain.kmeans.ari) == pytest.approx(ari, abs=1e-12)
        assert np.mean(plain.method.ari) > np.mean(plain.kmeans.ari)

        l1 = comparison_study(calibrated, PenaltySpec(PenaltyKind.L1, 1.5), replicates=20)
        assert len(l1.method.ari) + l1.failures == 20
        assert l1.failures < 20

    def test_scenario_ii_selection(self):
        """Every penalty cell finishes all replicates, failures included"""
        scenario = ScenarioSpec.from_name("II", seed=5)
        penalties = [PenaltySpec(kind, lam) for kind in (PenaltyKind.L1, PenaltyKind.L2, PenaltyKind.NUCLEAR)
                     for lam in (0.5, 1.0, 1.5)]
        cells = selection_study(scenario, penalties, k_values=(2, 3, 4), replicates=5,
                                cfg=FitConfig(max_iter=50, n_starts=1))
        assert len(cells) == 9
        for cell in cells:
            assert cell.replicates == 5
            assert sum(cell.counts.values()) + cell.failures == 5
