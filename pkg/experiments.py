"""
Replicate studies over the synthetic scenarios

selection_study: how often CVPL picks each k across fresh datasets.
comparison_study: ARI / accuracy of the penalized mixture against k-means.
calibrate_amplitude: mean amplitude that puts k-means into a target ARI band.
"""
import csv
import io
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import NumericFailure, ValidationError
from evalgen import ScenarioSpec, adjusted_rand_index, clustering_accuracy, generate_scenario, kmeans_vectorized
from logger import get_logger
from matnorm import derive_seeds
from mixture import FitConfig, PenaltySpec, fit_em
from modelsel import CvplConfig, select_k

logger = get_logger(__name__)


@dataclass
class SelectionCell:
    kind: str
    lam: float
    counts: Dict[int, int]
    replicates: int
    # replicates whose CVPL fits broke down; they select no k
    failures: int = 0

    def frequency(self, k: int) -> float:
        return self.counts.get(k, 0) / self.replicates


@dataclass
class MethodScores:
    name: str
    ari: List[float] = field(default_factory=list)
    accuracy: List[float] = field(default_factory=list)

    def summary(self) -> Tuple[float, float, float, float]:
        """mean ARI, sd ARI, mean accuracy, sd accuracy"""
        ari = np.asarray(self.ari)
        acc = np.asarray(self.accuracy)
        return float(ari.mean()), float(ari.std()), float(acc.mean()), float(acc.std())


@dataclass
class ComparisonResult:
    penalty: PenaltySpec
    method: MethodScores
    kmeans: MethodScores
    failures: int = 0


def _replicates(scenario: ScenarioSpec, replicates: int):
    if replicates < 1:
        raise ValidationError("replicates must be at least 1")
    for seed in derive_seeds(scenario.seed, replicates):
        yield seed, generate_scenario(replace(scenario, seed=seed))


def selection_study(scenario: ScenarioSpec, penalties: Sequence[PenaltySpec],
                    k_values: Sequence[int] = (2, 3, 4), replicates: int = 20,
                    sel: Optional[CvplConfig] = None,
                    cfg: Optional[FitConfig] = None) -> List[SelectionCell]:
    """Per penalty setting, how often each k is selected over replicate datasets"""
    cfg = cfg or FitConfig()
    sel = sel or CvplConfig(k_values=k_values)
    sel = replace(sel, k_values=k_values)
    cells = [SelectionCell(kind=p.effective().kind.value, lam=p.effective().lam, counts={}, replicates=0)
             for p in penalties]

    for rep, (seed, data) in enumerate(_replicates(scenario, replicates)):
        for cell, penalty in zip(cells, penalties):
            cell.replicates += 1
            try:
                table = select_k(data.stack, penalty, replace(sel, seed=seed), replace(cfg, seed=seed))
            except NumericFailure as e:
                logger.warning(f"Replicate {rep + 1} {cell.kind}:{cell.lam}: selection failed ({e})")
                cell.failures += 1
                continue
            cell.counts[table.selected_k] = cell.counts.get(table.selected_k, 0) + 1
        logger.info(f"Selection replicate {rep + 1}/{replicates} done")
    return cells


def comparison_study(scenario: ScenarioSpec, penalty: PenaltySpec, replicates: int = 20,
                     k: int = 2, cfg: Optional[FitConfig] = None) -> ComparisonResult:
    """Mixture fit vs k-means, scored against the generating labels"""
    cfg = cfg or FitConfig()
    method = MethodScores(name=f"{penalty.effective().kind.value}:{penalty.effective().lam}")
    baseline = MethodScores(name="kmeans")
    failures = 0

    for rep, (seed, data) in enumerate(_replicates(scenario, replicates)):
        km = kmeans_vectorized(data.stack, k, seed=seed)
        baseline.ari.append(adjusted_rand_index(km, data.labels))
        baseline.accuracy.append(clustering_accuracy(km, data.labels))
        try:
            report = fit_em(data.stack, k, penalty, replace(cfg, seed=seed))
        except NumericFailure as e:
            logger.warning(f"Replicate {rep + 1}: fit failed ({e}); skipped")
            failures += 1
            continue
        method.ari.append(adjusted_rand_index(report.hard_labels, data.labels))
        method.accuracy.append(clustering_accuracy(report.hard_labels, data.labels))

    if not method.ari:
        raise NumericFailure(f"all {replicates} replicate fits failed")
    return ComparisonResult(penalty=penalty.effective(), method=method, kmeans=baseline, failures=failures)


def kmeans_ari(scenario: ScenarioSpec, replicates: int, k: int = 2) -> float:
    """Mean k-means ARI over replicate datasets"""
    scores = [adjusted_rand_index(kmeans_vectorized(data.stack, k, seed=seed), data.labels)
              for seed, data in _replicates(scenario, replicates)]
    return float(np.mean(scores))


def calibrate_amplitude(scenario: ScenarioSpec, grid: Sequence[float],
                        band: Tuple[float, float] = (0.4, 0.65),
                        replicates: int = 10) -> Tuple[float, float]:
    """Smallest amplitude on the grid whose k-means mean ARI lands in band"""
    low, high = band
    tried = []
    for amplitude in sorted(grid):
        ari = kmeans_ari(replace(scenario, mean_amplitude=amplitude), replicates)
        logger.info(f"amplitude={amplitude:g}: k-means mean ARI={ari:.3f}")
        tried.append((amplitude, ari))
        if low <= ari <= high:
            return amplitude, ari
    raise ValidationError(
        "no amplitude on the grid puts k-means in the target band: "
        + ", ".join(f"{a:g}->{s:.3f}" for a, s in tried)
    )


def comparison_to_csv(results: Sequence[ComparisonResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "lambda", "ari_mean", "ari_sd", "accuracy_mean", "accuracy_sd", "replicates"])
    seen_kmeans = False
    for result in results:
        rows = [(result.penalty.kind.value, result.penalty.lam, result.method)]
        if not seen_kmeans:
            rows.insert(0, ("kmeans", 0.0, result.kmeans))
            seen_kmeans = True
        for name, lam, scores in rows:
            ari_m, ari_s, acc_m, acc_s = scores.summary()
            writer.writerow([name, repr(lam), f"{ari_m:.4f}", f"{ari_s:.4f}", f"{acc_m:.4f}", f"{acc_s:.4f}",
                             len(scores.ari)])
    return buf.getvalue()
