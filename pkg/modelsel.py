"""
Cross-validated penalized likelihood (CVPL) and choice of the number of clusters

CVPL is reported higher-is-better: the held-out penalized log-likelihood
per test sample, with the penalty evaluated at the train-fitted means.
"""
import csv
import io
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from errors import DimensionMismatch, ValidationError
from logger import get_logger
from matnorm import MatrixStack, as_stack, derive_seeds
from mixture import FitConfig, PenaltySpec, fit_em, observed_loglik, penalty_value

logger = get_logger(__name__)


@dataclass
class CvplConfig:
    k_values: Sequence[int] = (1, 2, 3, 4)
    folds: Optional[int] = 5
    # holdout fraction; used instead of folds when set
    holdout: Optional[float] = None
    replicates: int = 1
    seed: int = 0

    def __post_init__(self):
        self.k_values = sorted(set(int(k) for k in self.k_values))
        if not self.k_values or self.k_values[0] < 1:
            raise ValidationError("k_values must be nonempty and each >= 1")
        if self.replicates < 1:
            raise ValidationError("replicates must be at least 1")
        if self.holdout is not None:
            if not 0 < self.holdout < 1:
                raise ValidationError(f"holdout fraction must be in (0, 1), got {self.holdout}")
        elif self.folds is None or self.folds < 2:
            raise ValidationError("fold count must be at least 2")


@dataclass
class CvplRow:
    kind: str
    lam: float
    k: int
    mean: float
    stderr: float
    scores: List[float] = field(default_factory=list)


@dataclass
class CvplTable:
    rows: List[CvplRow]
    selected_k: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["penalty", "lambda", "k", "cvpl_mean", "cvpl_stderr", "selected"])
        for row in self.rows:
            writer.writerow([row.kind, repr(row.lam), row.k, repr(row.mean), repr(row.stderr),
                             int(row.k == self.selected_k)])
        return buf.getvalue()


def cvpl_score(train: MatrixStack, test: MatrixStack, k: int,
               penalty: PenaltySpec, cfg: FitConfig) -> float:
    """Held-out penalized log-likelihood per test sample"""
    train = as_stack(train)
    test = as_stack(test)
    if train.shape[1:] != test.shape[1:]:
        raise DimensionMismatch("train and test matrices differ in shape")
    report = fit_em(train, k, penalty, cfg)
    penalty = penalty.effective()
    score = observed_loglik(test, report.model)
    if penalty.active:
        score -= penalty.lam * penalty_value(report.model.means, penalty)
    return score / test.shape[0]


def _splits(n: int, sel: CvplConfig, seed: int):
    """(train_idx, test_idx) pairs for one replicate"""
    perm = np.random.default_rng(seed).permutation(n)
    if sel.holdout is not None:
        n_test = max(1, int(round(sel.holdout * n)))
        if n_test >= n:
            raise ValidationError("holdout leaves no training samples")
        yield np.sort(perm[n_test:]), np.sort(perm[:n_test])
        return
    if sel.folds > n:
        raise ValidationError(f"{sel.folds} folds requested for {n} samples")
    for test in np.array_split(perm, sel.folds):
        yield np.sort(np.setdiff1d(perm, test)), np.sort(test)


def _summarize(scores: List[float]):
    values = np.asarray(scores)
    mean = float(values.mean())
    stderr = float(values.std(ddof=1) / np.sqrt(len(values))) if len(values) > 1 else 0.0
    return mean, stderr


def select_k(stack: MatrixStack, penalty: PenaltySpec, sel: CvplConfig,
             cfg: Optional[FitConfig] = None) -> CvplTable:
    """Average CVPL per candidate k; the best mean wins, ties go to the smaller k"""
    stack = as_stack(stack)
    cfg = cfg or FitConfig()
    n = stack.shape[0]
    penalty = penalty.effective()

    n_splits = 1 if sel.holdout is not None else sel.folds
    fit_seeds = derive_seeds(cfg.seed, sel.replicates * n_splits)

    scores: Dict[int, List[float]] = {k: [] for k in sel.k_values}
    for rep, rep_seed in enumerate(derive_seeds(sel.seed, sel.replicates)):
        for fold, (train_idx, test_idx) in enumerate(_splits(n, sel, rep_seed)):
            if len(train_idx) < 2 * max(sel.k_values):
                raise ValidationError(
                    f"training split of {len(train_idx)} samples is too small for k={max(sel.k_values)}"
                )
            fold_cfg = replace(cfg, seed=fit_seeds[rep * n_splits + fold])
            for k in sel.k_values:
                score = cvpl_score(stack[train_idx], stack[test_idx], k, penalty, fold_cfg)
                logger.debug(f"replicate {rep} fold {fold} k={k}: cvpl={score:.6f}")
                scores[k].append(score)

    rows = []
    best_k, best_mean = None, -np.inf
    for k in sel.k_values:
        mean, stderr = _summarize(scores[k])
        rows.append(CvplRow(kind=penalty.kind.value, lam=penalty.lam, k=k, mean=mean,
                            stderr=stderr, scores=scores[k]))
        if best_k is None or mean > best_mean:
            best_k, best_mean = k, mean
    logger.info(f"CVPL ({penalty.kind.value}, lambda={penalty.lam}) selects k={best_k}")
    return CvplTable(rows=rows, selected_k=best_k)


def cvpl_grid(stack: MatrixStack, penalties: Sequence[PenaltySpec], sel: CvplConfig,
              cfg: Optional[FitConfig] = None) -> List[CvplTable]:
    """One CVPL table per penalty setting"""
    return [select_k(stack, penalty, sel, cfg) for penalty in penalties]


def grid_to_csv(tables: Sequence[CvplTable]) -> str:
    """Concatenate tables under a single header"""
    chunks = [table.to_csv() for table in tables]
    if not chunks:
        return ""
    header, *_ = chunks[0].splitlines(keepends=True)
    return header + "".join(chunk.split("\n", 1)[1] for chunk in chunks)
