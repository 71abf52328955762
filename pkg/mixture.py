"""
Penalized mixture of matrix normals, fitted by EM

E-step: log-domain posterior responsibilities.
M-step: mixing weights, penalized mean update (soft-threshold for L1,
one-step-late shifts for L2 and nuclear norm), weighted flip-flop
covariances, eigenvalue clamping to [eig_floor, eig_cap], scale normalization.
A start whose mean update leaves the data range stops early with
converged=False and keeps its last finite model.
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from errors import (
    DegenerateClusterInit,
    DimensionMismatch,
    DivergedUpdate,
    EmptyClusterError,
    NotPositiveDefinite,
    NumericFailure,
    ValidationError,
)
from evalgen import kmeans_vectorized
from flipflop import FlipFlopConfig, column_covariance, flip_flop_mle, row_covariance, weighted_mean
from logger import get_logger
from matnorm import ComponentParams, MatrixStack, as_stack, derive_seeds, matnorm_logpdf_stack, normalize_scale

logger = get_logger(__name__)

EMPTY_CLUSTER_MASS = 1e-8
MAX_RESEEDS = 3
MAX_INIT_ATTEMPTS = 10
# A mean update may not exceed this multiple of 1 + max|Y|
DIVERGENCE_FACTOR = 1e3


class PenaltyKind(Enum):
    NONE = "none"
    L1 = "l1"
    L2 = "l2"
    NUCLEAR = "nuclear"


class InitMethod(Enum):
    KMEANS = "kmeans"
    RANDOM = "random"


@dataclass(frozen=True)
class PenaltySpec:
    kind: PenaltyKind = PenaltyKind.NONE
    lam: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", PenaltyKind(self.kind))
        object.__setattr__(self, "lam", float(self.lam))
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValidationError(f"lambda must be finite and nonnegative, got {self.lam}")

    @property
    def active(self) -> bool:
        return self.kind is not PenaltyKind.NONE and self.lam > 0

    def effective(self) -> "PenaltySpec":
        """A zero-strength penalty is no penalty"""
        return self if self.active else PenaltySpec(PenaltyKind.NONE, 0.0)


@dataclass(frozen=True, eq=False)
class MixtureModel:
    components: Tuple[ComponentParams, ...]
    weights: np.ndarray

    def __post_init__(self):
        components = tuple(self.components)
        weights = np.array(self.weights, dtype=float)
        if not components:
            raise ValidationError("a mixture needs at least one component")
        shape = components[0].M.shape
        if any(c.M.shape != shape for c in components):
            raise DimensionMismatch("components disagree on r x p")
        if weights.shape != (len(components),):
            raise DimensionMismatch(f"expected {len(components)} mixing weights, got {weights.shape}")
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-10:
            raise ValidationError("mixing weights must be positive and sum to 1")
        weights.setflags(write=False)
        object.__setattr__(self, "components", components)
        object.__setattr__(self, "weights", weights)

    @property
    def k(self) -> int:
        return len(self.components)

    @property
    def r(self) -> int:
        return self.components[0].r

    @property
    def p(self) -> int:
        return self.components[0].p

    @property
    def means(self) -> List[np.ndarray]:
        return [c.M for c in self.components]


@dataclass
class Responsibilities:
    alpha: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        if self.alpha.ndim != 2:
            raise DimensionMismatch("responsibilities must be an n x k matrix")

    def hard_labels(self) -> np.ndarray:
        return self.alpha.argmax(axis=1)


@dataclass
class FitConfig:
    max_iter: int = 200
    # None means 1e-4 * sqrt(r * p)
    mean_tol: Optional[float] = None
    eig_floor: float = 1e-4
    eig_cap: float = 1e4
    inner_flipflop: FlipFlopConfig = field(default_factory=FlipFlopConfig)
    init: InitMethod = InitMethod.KMEANS
    seed: int = 0
    n_starts: int = 3

    def __post_init__(self):
        self.init = InitMethod(self.init)
        if self.max_iter < 1:
            raise ValidationError("max_iter must be at least 1")
        if self.n_starts < 1:
            raise ValidationError("n_starts must be at least 1")
        if not 0 < self.eig_floor < self.eig_cap:
            raise ValidationError("need 0 < eig_floor < eig_cap")
        if self.mean_tol is not None and not self.mean_tol > 0:
            raise ValidationError("mean_tol must be positive")

    def tolerance_for(self, r: int, p: int) -> float:
        return self.mean_tol if self.mean_tol is not None else 1e-4 * np.sqrt(r * p)


@dataclass
class FitDiagnostics:
    """Per-run counters shared by the M-steps of one EM start"""
    clamped_fallbacks: int = 0


@dataclass
class FitReport:
    model: MixtureModel
    resp: Responsibilities
    objective_trace: List[float]
    iterations: int
    converged: bool
    hard_labels: np.ndarray
    penalty: PenaltySpec = field(default_factory=PenaltySpec)
    seed: int = 0
    reseeds: int = 0
    # trace indices of the objective recorded right after a re-seed
    reseed_steps: List[int] = field(default_factory=list)
    # stopped early on a DivergedUpdate, model is the last finite one
    diverged: bool = False
    clamped_fallbacks: int = 0

    @property
    def final_objective(self) -> float:
        return self.objective_trace[-1]


def _check_stack(stack: MatrixStack, model: MixtureModel) -> MatrixStack:
    stack = as_stack(stack)
    if stack.shape[1:] != (model.r, model.p):
        raise DimensionMismatch(
            f"samples are {stack.shape[1]}x{stack.shape[2]}, model is {model.r}x{model.p}"
        )
    return stack


def _joint_log_densities(stack: MatrixStack, model: MixtureModel) -> np.ndarray:
    """n x k matrix of log pi_j + log f(Y_i | theta_j)"""
    cols = []
    for j, comp in enumerate(model.components):
        try:
            cols.append(np.log(model.weights[j]) + matnorm_logpdf_stack(stack, comp))
        except NotPositiveDefinite as e:
            e.component = j
            raise
    return np.column_stack(cols)


def observed_loglik(stack: MatrixStack, model: MixtureModel) -> float:
    """sum_i log sum_j pi_j f(Y_i | theta_j)"""
    stack = _check_stack(stack, model)
    return float(logsumexp(_joint_log_densities(stack, model), axis=1).sum())


def penalty_value(means: Sequence[np.ndarray], penalty: PenaltySpec) -> float:
    """P summed over components (without lambda)"""
    kind = penalty.kind
    if kind is PenaltyKind.NONE:
        return 0.0
    if kind is PenaltyKind.L1:
        return float(sum(np.abs(m).sum() for m in means))
    if kind is PenaltyKind.L2:
        # squared Frobenius; its gradient is the 2 lambda M of the L2 update
        return float(sum((m ** 2).sum() for m in means))
    return float(sum(np.linalg.svd(m, compute_uv=False).sum() for m in means))


def penalized_objective(stack: MatrixStack, model: MixtureModel, penalty: PenaltySpec) -> float:
    """observed log-likelihood minus lambda * P(means)"""
    loglik = observed_loglik(stack, model)
    penalty = penalty.effective()
    if not penalty.active:
        return loglik
    return loglik - penalty.lam * penalty_value(model.means, penalty)


def e_step(stack: MatrixStack, model: MixtureModel) -> Responsibilities:
    """Posterior membership probabilities via a log-domain softmax"""
    stack = _check_stack(stack, model)
    joint = _joint_log_densities(stack, model)
    alpha = np.exp(joint - logsumexp(joint, axis=1, keepdims=True))
    alpha /= alpha.sum(axis=1, keepdims=True)
    return Responsibilities(alpha)


def clamp_eigenvalues(S: np.ndarray, floor: float, cap: float) -> np.ndarray:
    """Symmetric matrix with eigenvalues clipped to [floor, cap]; untouched if already inside"""
    S = 0.5 * (S + S.T)
    w, Q = np.linalg.eigh(S)
    if w.min() >= floor and w.max() <= cap:
        return S
    w = np.clip(w, floor, cap)
    out = (Q * w) @ Q.T
    return 0.5 * (out + out.T)


def _penalized_mean(m_tilde: np.ndarray, mass: float, prev: ComponentParams,
                    penalty: PenaltySpec) -> np.ndarray:
    if not penalty.active:
        return m_tilde
    step = penalty.lam / mass
    U, M, V = prev.U, prev.M, prev.V
    if penalty.kind is PenaltyKind.L1:
        threshold = step * (U @ np.ones_like(m_tilde) @ V)
        return np.sign(m_tilde) * np.maximum(np.abs(m_tilde) - threshold, 0.0)
    if penalty.kind is PenaltyKind.L2:
        return m_tilde - 2.0 * step * (U @ M @ V)
    # nuclear: subgradient U Phi Omega^T V from the thin SVD of the previous mean
    phi, sigma, omega_t = np.linalg.svd(M, full_matrices=False)
    rank = int((sigma > sigma.max(initial=0.0) * max(M.shape) * np.finfo(float).eps).sum())
    if rank == 0:
        return m_tilde
    return m_tilde - step * (U @ phi[:, :rank] @ omega_t[:rank] @ V)


def _clamped_sweeps(resid: np.ndarray, weights: np.ndarray, U: np.ndarray,
                    cfg: FitConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Flip-flop with clamping after every update, for rank-deficient scatter"""
    inner = cfg.inner_flipflop
    U = clamp_eigenvalues(U, cfg.eig_floor, cfg.eig_cap)
    V = clamp_eigenvalues(column_covariance(resid, weights, U), cfg.eig_floor, cfg.eig_cap)
    for _ in range(inner.max_iter):
        U_new = clamp_eigenvalues(row_covariance(resid, weights, V), cfg.eig_floor, cfg.eig_cap)
        V_new = clamp_eigenvalues(column_covariance(resid, weights, U_new), cfg.eig_floor, cfg.eig_cap)
        done = (np.linalg.norm(U_new - U) <= inner.tolerance
                and np.linalg.norm(V_new - V) <= inner.tolerance)
        U, V = U_new, V_new
        if done:
            break
    return U, V


def estimate_component(stack: MatrixStack, weights: np.ndarray, mean: Optional[np.ndarray],
                       initial_u: Optional[np.ndarray], cfg: FitConfig,
                       diagnostics: Optional[FitDiagnostics] = None) -> ComponentParams:
    """Weighted flip-flop covariances around mean, clamped and normalized"""
    inner = cfg.inner_flipflop
    try:
        result = flip_flop_mle(
            stack,
            FlipFlopConfig(tolerance=inner.tolerance, max_iter=inner.max_iter,
                           weights=weights, initial_u=initial_u),
            mean=mean,
        )
        M, U, V = result.params.M, result.params.U, result.params.V
    except NotPositiveDefinite as e:
        # warn on the first fallback of a run only
        first = diagnostics is None or diagnostics.clamped_fallbacks == 0
        if diagnostics is not None:
            diagnostics.clamped_fallbacks += 1
        log = logger.warning if first else logger.debug
        log(f"Covariance scatter not positive definite ({e}); using clamped updates")
        keep = weights > 0
        sub, w = stack[keep], weights[keep]
        M = weighted_mean(sub, w) if mean is None else mean
        start = np.eye(stack.shape[1]) if initial_u is None else initial_u
        U, V = _clamped_sweeps(sub - M, w, start, cfg)

    if not (np.all(np.isfinite(U)) and np.all(np.isfinite(V))):
        raise DivergedUpdate("covariance update is not finite")
    U = clamp_eigenvalues(U, cfg.eig_floor, cfg.eig_cap)
    V = clamp_eigenvalues(V, cfg.eig_floor, cfg.eig_cap)
    theta = normalize_scale(ComponentParams(M=M, U=U, V=V))
    return ComponentParams(
        M=theta.M,
        U=clamp_eigenvalues(theta.U, cfg.eig_floor, cfg.eig_cap),
        V=clamp_eigenvalues(theta.V, cfg.eig_floor, cfg.eig_cap),
    )


def m_step(stack: MatrixStack, resp: Responsibilities, prev: MixtureModel,
           penalty: PenaltySpec, cfg: FitConfig,
           diagnostics: Optional[FitDiagnostics] = None) -> MixtureModel:
    """Maximize the expected complete-data (penalized) log-likelihood"""
    stack = _check_stack(stack, prev)
    alpha = resp.alpha
    n = stack.shape[0]
    if alpha.shape != (n, prev.k):
        raise DimensionMismatch(f"responsibilities are {alpha.shape}, expected {(n, prev.k)}")
    penalty = penalty.effective()
    mass = alpha.sum(axis=0)
    for j in range(prev.k):
        if mass[j] < EMPTY_CLUSTER_MASS:
            raise EmptyClusterError(f"cluster mass {mass[j]:.3e} below {EMPTY_CLUSTER_MASS}", component=j)

    bound = DIVERGENCE_FACTOR * (1.0 + float(np.abs(stack).max()))
    components = []
    for j, comp in enumerate(prev.components):
        try:
            m_tilde = weighted_mean(stack, alpha[:, j])
            m_hat = _penalized_mean(m_tilde, mass[j], comp, penalty)
            if not np.all(np.isfinite(m_hat)) or np.abs(m_hat).max() > bound:
                raise DivergedUpdate(f"penalized mean update diverged (max |M| above {bound:.3g})")
            components.append(estimate_component(stack, alpha[:, j], m_hat, comp.U, cfg, diagnostics))
        except NumericFailure as e:
            e.component = j
            raise
    weights = mass / n
    return MixtureModel(components=tuple(components), weights=weights / weights.sum())


def _initial_labels(stack: MatrixStack, k: int, cfg: FitConfig, seed: int) -> np.ndarray:
    if cfg.init is InitMethod.KMEANS:
        return kmeans_vectorized(stack, k, seed=seed)
    n = stack.shape[0]
    return np.random.default_rng(seed).permutation(np.arange(n) % k)


def initialize(stack: MatrixStack, k: int, cfg: FitConfig, seed: Optional[int] = None,
               diagnostics: Optional[FitDiagnostics] = None) -> Tuple[MixtureModel, Responsibilities]:
    """Hard partition (k-means or random), then per-cluster flip-flop"""
    stack = as_stack(stack)
    n = stack.shape[0]
    if k < 1 or n < 2 * k:
        raise ValidationError(f"need k >= 1 and n >= 2k, got k={k} n={n}")
    seed = cfg.seed if seed is None else seed

    attempt_seeds = [seed] + derive_seeds(seed, MAX_INIT_ATTEMPTS - 1)
    for attempt, attempt_seed in enumerate(attempt_seeds):
        labels = _initial_labels(stack, k, cfg, attempt_seed)
        counts = np.bincount(labels, minlength=k)
        if counts.min() >= 2:
            break
        logger.warning(f"Initial partition attempt {attempt + 1} has a cluster with {counts.min()} members; retrying")
    else:
        raise DegenerateClusterInit(f"no initial partition with >= 2 members per cluster after {MAX_INIT_ATTEMPTS} attempts")

    components = []
    for j in range(k):
        try:
            components.append(estimate_component(stack[labels == j], np.ones(counts[j]), None, None, cfg, diagnostics))
        except NumericFailure as e:
            e.component = j
            raise
    model = MixtureModel(components=tuple(components), weights=counts / n)
    alpha = np.zeros((n, k))
    alpha[np.arange(n), labels] = 1.0
    return model, Responsibilities(alpha)


def canonical_order(model: MixtureModel, resp: Responsibilities) -> Tuple[MixtureModel, Responsibilities]:
    """Decreasing mixing weight, ties broken lexicographically on vec(M)"""
    order = sorted(range(model.k), key=lambda j: (-model.weights[j], tuple(model.components[j].M.ravel())))
    reordered = MixtureModel(
        components=tuple(model.components[j] for j in order),
        weights=model.weights[order],
    )
    return reordered, Responsibilities(resp.alpha[:, order])


def _reseed(stack: MatrixStack, model: MixtureModel, resp: Responsibilities,
            j: int, cfg: FitConfig) -> MixtureModel:
    """Move component j onto the worst-explained sample with identity covariances"""
    i = int(resp.alpha.max(axis=1).argmin())
    r, p = model.r, model.p
    fresh = ComponentParams(
        M=stack[i],
        U=clamp_eigenvalues(np.eye(r), cfg.eig_floor, cfg.eig_cap),
        V=clamp_eigenvalues(np.eye(p), cfg.eig_floor, cfg.eig_cap),
    )
    components = list(model.components)
    components[j] = fresh
    weights = np.array(model.weights)
    weights[j] = 1.0 / stack.shape[0]
    return MixtureModel(components=tuple(components), weights=weights / weights.sum())


def _fit_single(stack: MatrixStack, k: int, penalty: PenaltySpec, cfg: FitConfig, seed: int) -> FitReport:
    diagnostics = FitDiagnostics()
    model, resp = initialize(stack, k, cfg, seed, diagnostics)
    tol = cfg.tolerance_for(model.r, model.p)
    trace: List[float] = []
    reseed_steps: List[int] = []
    converged = False
    diverged = False
    reseeds = 0
    iterations = 0

    for iterations in range(1, cfg.max_iter + 1):
        try:
            resp = e_step(stack, model)
            new_model = m_step(stack, resp, model, penalty, cfg, diagnostics)
        except EmptyClusterError as e:
            reseeds += 1
            e.iteration = iterations
            if reseeds > MAX_RESEEDS:
                raise
            logger.warning(f"{e}; re-seeding (re-seed {reseeds} of {MAX_RESEEDS})")
            model = _reseed(stack, model, resp, e.component, cfg)
            reseed_steps.append(len(trace))
            trace.append(penalized_objective(stack, model, penalty))
            continue
        except DivergedUpdate as e:
            # one-step-late shifts can overshoot; keep the last finite model
            e.iteration = iterations
            logger.warning(f"{e}; stopping with the previous iterate")
            diverged = True
            break
        except NumericFailure as e:
            e.iteration = iterations
            raise

        change = sum(np.linalg.norm(a - b) for a, b in zip(new_model.means, model.means))
        model = new_model
        trace.append(penalized_objective(stack, model, penalty))
        logger.debug(f"EM iteration {iterations}: objective={trace[-1]:.6f} mean change={change:.3e}")
        if change <= tol:
            converged = True
            break

    if not trace:
        trace.append(penalized_objective(stack, model, penalty))
    if diagnostics.clamped_fallbacks > 1:
        logger.info(f"Clamped covariance updates used {diagnostics.clamped_fallbacks} times in this start")
    resp = e_step(stack, model)
    model, resp = canonical_order(model, resp)
    return FitReport(model=model, resp=resp, objective_trace=trace, iterations=iterations,
                     converged=converged, hard_labels=resp.hard_labels(), penalty=penalty,
                     seed=seed, reseeds=reseeds, reseed_steps=reseed_steps, diverged=diverged,
                     clamped_fallbacks=diagnostics.clamped_fallbacks)


def fit_em(stack: MatrixStack, k: int, penalty: Optional[PenaltySpec] = None,
           cfg: Optional[FitConfig] = None) -> FitReport:
    """Best of n_starts EM runs by final penalized objective"""
    stack = as_stack(stack)
    penalty = (penalty or PenaltySpec()).effective()
    cfg = cfg or FitConfig()
    logger.info(f"Fitting k={k} penalty={penalty.kind.value} lambda={penalty.lam} "
                f"on n={stack.shape[0]} samples of {stack.shape[1]}x{stack.shape[2]}")

    best: Optional[FitReport] = None
    failure: Optional[NumericFailure] = None
    for start, seed in enumerate(derive_seeds(cfg.seed, cfg.n_starts)):
        try:
            report = _fit_single(stack, k, penalty, cfg, seed)
        except NumericFailure as e:
            logger.warning(f"Start {start + 1}/{cfg.n_starts} failed: {e}")
            failure = e
            continue
        logger.debug(f"Start {start + 1}/{cfg.n_starts}: objective={report.final_objective:.6f} "
                     f"iterations={report.iterations} converged={report.converged}")
        if best is None or report.final_objective > best.final_objective:
            best = report

    if best is None:
        raise failure
    if best.diverged:
        logger.warning(f"EM stopped after a diverging penalized update at iteration {best.iterations}")
    elif not best.converged:
        logger.warning(f"EM did not meet the mean-change tolerance within {cfg.max_iter} iterations")
    logger.info(f"Fit finished: objective={best.final_objective:.6f} iterations={best.iterations}")
    return best


def component_separation(model: MixtureModel) -> Optional[Tuple[float, float]]:
    """Smallest eigenvalue of U_h U_j^-1 and of V_h V_j^-1 over pairs h != j"""
    if model.k < 2:
        return None
    d_row, d_col = np.inf, np.inf
    for h, a in enumerate(model.components):
        for j, b in enumerate(model.components):
            if h == j:
                continue
            d_row = min(d_row, linalg.eigh(a.U, b.U, eigvals_only=True).min())
            d_col = min(d_col, linalg.eigh(a.V, b.V, eigvals_only=True).min())
    return float(d_row), float(d_col)
