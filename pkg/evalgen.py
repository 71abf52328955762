"""
Synthetic scenarios, clustering metrics and the k-means baseline

Scenarios are two equally weighted matrix-normal clusters with a filled
square and a plus-shaped cross as mean images, both with AR(1) row and
column covariances.
"""
from dataclasses import dataclass
from enum import Enum
from typing import List

import numpy as np
from scipy import linalg
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from errors import InvalidRho, LengthMismatch, TooManyClusters, TooSmall, ValidationError
from logger import get_logger
from matnorm import ComponentParams, MatrixStack, as_stack, derive_seeds, matnorm_sample

logger = get_logger(__name__)

MAX_ACCURACY_CLUSTERS = 10


class ScenarioName(Enum):
    I = "I"
    II = "II"
    III = "III"
    IV = "IV"


# (n, r, p) per scenario
SCENARIO_DEFAULTS = {
    ScenarioName.I: (100, 60, 60),
    ScenarioName.II: (50, 30, 30),
    ScenarioName.III: (50, 20, 20),
    ScenarioName.IV: (100, 60, 60),
}


@dataclass
class ScenarioSpec:
    name: ScenarioName
    n: int
    r: int
    p: int
    rho: float = 0.9
    mean_amplitude: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.name = ScenarioName(self.name)
        if self.n < 2:
            raise ValidationError("a scenario needs at least two samples")
        if abs(self.rho) >= 1:
            raise InvalidRho(f"|rho| must be below 1, got {self.rho}")

    @classmethod
    def from_name(cls, name, **overrides) -> "ScenarioSpec":
        """Scenario with its default sizes, any field overridable"""
        key = ScenarioName(name)
        n, r, p = SCENARIO_DEFAULTS[key]
        fields = {"n": n, "r": r, "p": p}
        fields.update({k: v for k, v in overrides.items() if v is not None})
        return cls(name=key, **fields)


@dataclass
class LabeledStack:
    stack: MatrixStack
    labels: np.ndarray

    def __post_init__(self):
        if len(self.labels) != self.stack.shape[0]:
            raise LengthMismatch("labels and samples differ in length")


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia_trace: List[float]
    iterations: int


def ar_covariance(dim: int, rho: float) -> np.ndarray:
    """Matrix with entries rho^|a-b|"""
    if dim < 1:
        raise ValidationError("dim must be at least 1")
    if abs(rho) >= 1:
        raise InvalidRho(f"|rho| must be below 1, got {rho}")
    return linalg.toeplitz(float(rho) ** np.arange(dim))


def _block_width(r: int, p: int) -> int:
    if r < 5 or p < 5:
        raise TooSmall(f"mean images need r, p >= 5, got {r}x{p}")
    return min(r, p) // 6


def mean_square(r: int, p: int, amplitude: float) -> np.ndarray:
    """Filled central block of half-width min(r,p)//6"""
    w = _block_width(r, p)
    rows = np.abs(np.arange(r) - r // 2) <= w
    cols = np.abs(np.arange(p) - p // 2) <= w
    return amplitude * np.outer(rows, cols).astype(float)


def mean_cross(r: int, p: int, amplitude: float) -> np.ndarray:
    """Plus shape: central row band union central column band"""
    w = _block_width(r, p)
    rows = np.abs(np.arange(r) - r // 2) <= w
    cols = np.abs(np.arange(p) - p // 2) <= w
    return amplitude * (rows[:, None] | cols[None, :]).astype(float)


def generate_scenario(spec: ScenarioSpec) -> LabeledStack:
    """Two equal clusters (square mean, cross mean) with AR(1) U and V"""
    U = ar_covariance(spec.r, spec.rho)
    V = ar_covariance(spec.p, spec.rho)
    means = [mean_square(spec.r, spec.p, spec.mean_amplitude),
             mean_cross(spec.r, spec.p, spec.mean_amplitude)]
    sizes = [spec.n - spec.n // 2, spec.n // 2]

    order_seed, *cluster_seeds = derive_seeds(spec.seed, 3)
    parts, labels = [], []
    for label, (mean, size, seed) in enumerate(zip(means, sizes, cluster_seeds)):
        if size == 0:
            continue
        parts.append(matnorm_sample(ComponentParams(M=mean, U=U, V=V), size, seed))
        labels.append(np.full(size, label, dtype=int))
    stack = np.concatenate(parts)
    labels = np.concatenate(labels)

    perm = np.random.default_rng(order_seed).permutation(spec.n)
    logger.debug(f"Generated scenario {spec.name.value}: n={spec.n} r={spec.r} p={spec.p} seed={spec.seed}")
    return LabeledStack(stack=stack[perm], labels=labels[perm])


def _check_pair(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatch(f"label vectors differ: {a.shape} vs {b.shape}")
    return a, b


def _contingency(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def _pairs(counts) -> int:
    return sum(int(c) * (int(c) - 1) // 2 for c in np.ravel(counts))


def adjusted_rand_index(a, b) -> float:
    """Adjusted Rand index from the pair-counting contingency table"""
    a, b = _check_pair(a, b)
    if a.size < 2:
        raise ValidationError("ARI needs at least two labels")
    table = _contingency(a, b)
    total = a.size * (a.size - 1) // 2
    index = _pairs(table)
    sum_a = _pairs(table.sum(axis=1))
    sum_b = _pairs(table.sum(axis=0))

    # (index - expected) / (max - expected), scaled by total to stay in integers
    numerator = 2 * (index * total - sum_a * sum_b)
    denominator = (sum_a + sum_b) * total - 2 * sum_a * sum_b
    if denominator == 0:
        return 1.0
    return numerator / denominator


def clustering_accuracy(pred, truth) -> float:
    """Best fraction of matches over relabelings of pred"""
    pred, truth = _check_pair(pred, truth)
    if pred.size == 0:
        raise ValidationError("accuracy needs at least one label")
    table = _contingency(pred, truth)
    if max(table.shape) > MAX_ACCURACY_CLUSTERS:
        raise TooManyClusters(f"at most {MAX_ACCURACY_CLUSTERS} clusters supported")
    rows, cols = linear_sum_assignment(table, maximize=True)
    return float(table[rows, cols].sum()) / pred.size


def _kmeans_plus_plus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centroids = np.empty((k, X.shape[1]))
    centroids[0] = X[rng.integers(n)]
    for i in range(1, k):
        dist_sq = cdist(X, centroids[:i], "sqeuclidean").min(axis=1)
        total = dist_sq.sum()
        probs = dist_sq / total if total > 0 else np.full(n, 1.0 / n)
        centroids[i] = X[rng.choice(n, p=probs)]
    return centroids


def kmeans_fit(stack: MatrixStack, k: int, seed: int = 0, max_iter: int = 100) -> KMeansResult:
    """Lloyd's algorithm on vec(Y_i) with k-means++ seeding"""
    X = as_stack(stack)
    X = X.reshape(X.shape[0], -1)
    n = X.shape[0]
    if k < 1 or n < k:
        raise ValidationError(f"k-means needs 1 <= k <= n, got k={k} n={n}")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_plus_plus(X, k, rng)

    labels = None
    trace = []
    iterations = 0
    for iterations in range(1, max_iter + 1):
        dist = cdist(X, centroids, "sqeuclidean")
        new_labels = dist.argmin(axis=1)
        trace.append(float(dist[np.arange(n), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        nearest = dist[np.arange(n), labels]
        for j in range(k):
            members = labels == j
            if members.any():
                centroids[j] = X[members].mean(axis=0)
            else:
                # Empty cluster moves to the point farthest from its centroid
                far = int(nearest.argmax())
                logger.debug(f"k-means cluster {j} empty, re-seeding at sample {far}")
                centroids[j] = X[far]
                labels[far] = j
                nearest[far] = 0.0
    return KMeansResult(labels=labels.astype(int), centroids=centroids,
                        inertia_trace=trace, iterations=iterations)


def kmeans_vectorized(stack: MatrixStack, k: int, seed: int = 0, max_iter: int = 100) -> np.ndarray:
    """Cluster labels from k-means on the vectorized matrices"""
    return kmeans_fit(stack, k, seed=seed, max_iter=max_iter).labels

