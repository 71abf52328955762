"""
Flip-flop maximum likelihood estimation of (M, U, V)

Alternates the closed-form row covariance update given V and the column
covariance update given U, starting from U0 = identity. The weighted form
(responsibilities as sample weights) is the covariance half of the EM M-step.
"""
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy import linalg

from errors import AllWeightsZero, DimensionMismatch, NotPositiveDefinite, ValidationError
from logger import get_logger
from matnorm import ComponentParams, MatrixStack, as_stack, cholesky_factor, matnorm_logpdf_stack, normalize_scale

logger = get_logger(__name__)


@dataclass
class FlipFlopConfig:
    tolerance: float = 1e-6
    max_iter: int = 100
    weights: Optional[np.ndarray] = None
    # Override of U0 = identity
    initial_u: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValidationError("tolerance must be positive")
        if self.max_iter < 1:
            raise ValidationError("max_iter must be at least 1")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=float)
            if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
                raise ValidationError("weights must be finite and nonnegative")
            if not np.any(self.weights > 0):
                raise AllWeightsZero("at least one weight must be positive")


@dataclass
class FlipFlopResult:
    params: ComponentParams
    iterations: int
    converged: bool
    loglik_trace: List[float] = field(default_factory=list)


def _resolve_weights(stack: MatrixStack, weights) -> np.ndarray:
    n = stack.shape[0]
    if weights is None:
        return np.ones(n)
    w = np.asarray(weights, dtype=float)
    if w.shape != (n,):
        raise DimensionMismatch(f"Expected {n} weights, got shape {w.shape}")
    if np.any(w < 0):
        raise ValidationError("weights must be nonnegative")
    if not w.sum() > 0:
        raise AllWeightsZero("weights sum to zero")
    return w


def weighted_mean(stack: MatrixStack, weights) -> np.ndarray:
    """sum_i w_i Y_i / sum_i w_i"""
    stack = as_stack(stack)
    w = _resolve_weights(stack, weights)
    return np.tensordot(w, stack, axes=1) / w.sum()


def stack_loglik(stack: MatrixStack, theta: ComponentParams, weights=None) -> float:
    """sum_i w_i log f(Y_i | theta)"""
    stack = as_stack(stack)
    n = stack.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (n,):
        raise DimensionMismatch(f"Expected {n} weights, got shape {w.shape}")
    if not np.any(w != 0):
        if stack.shape[1:] != theta.M.shape:
            raise DimensionMismatch("Samples and parameters disagree on shape")
        return 0.0
    return float(w @ matnorm_logpdf_stack(stack, theta))


def row_covariance(resid: np.ndarray, weights: np.ndarray, V: np.ndarray) -> np.ndarray:
    """sum_i w_i D_i V^-1 D_i^T / (p sum w)"""
    n, r, p = resid.shape
    lv = cholesky_factor(V, "V")
    z = linalg.solve_triangular(lv, resid.transpose(2, 0, 1).reshape(p, n * r), lower=True)
    z = z.reshape(p, n, r) * np.sqrt(weights)[None, :, None]
    out = np.einsum("kni,knj->ij", z, z) / (p * weights.sum())
    return 0.5 * (out + out.T)


def column_covariance(resid: np.ndarray, weights: np.ndarray, U: np.ndarray) -> np.ndarray:
    """sum_i w_i D_i^T U^-1 D_i / (r sum w)"""
    n, r, p = resid.shape
    lu = cholesky_factor(U, "U")
    z = linalg.solve_triangular(lu, resid.transpose(1, 0, 2).reshape(r, n * p), lower=True)
    z = z.reshape(r, n, p) * np.sqrt(weights)[None, :, None]
    out = np.einsum("kni,knj->ij", z, z) / (r * weights.sum())
    return 0.5 * (out + out.T)


def flip_flop_mle(stack: MatrixStack, cfg: Optional[FlipFlopConfig] = None,
                  mean: Optional[np.ndarray] = None) -> FlipFlopResult:
    """
    Estimate (M, U, V) by alternating covariance updates.

    The mean is the weighted sample mean unless an explicit centring mean is
    given. Stops when both ||U1 - U0||_F and ||V1 - V0||_F are at most the
    tolerance, or after max_iter sweeps. The result is scale-normalized.
    """
    cfg = cfg or FlipFlopConfig()
    stack = as_stack(stack)
    w = _resolve_weights(stack, cfg.weights)

    # Zero-weight samples are dropped so an indicator-weighted run is the
    # sub-stack run, bit for bit
    keep = w > 0
    if not np.all(keep):
        stack, w = stack[keep], w[keep]
    n, r, p = stack.shape
    if n < 2:
        raise NotPositiveDefinite("covariance needs at least two weighted samples")

    M = weighted_mean(stack, w) if mean is None else np.asarray(mean, dtype=float)
    if M.shape != (r, p):
        raise DimensionMismatch(f"mean has shape {M.shape}, expected {(r, p)}")
    resid = stack - M

    U0 = np.eye(r) if cfg.initial_u is None else np.asarray(cfg.initial_u, dtype=float)
    if U0.shape != (r, r):
        raise DimensionMismatch(f"initial U has shape {U0.shape}, expected {(r, r)}")
    V0 = column_covariance(resid, w, U0)

    trace = [stack_loglik(stack, ComponentParams(M, U0, V0), w)]
    converged = False
    iterations = 0
    U1, V1 = U0, V0
    for iterations in range(1, cfg.max_iter + 1):
        U1 = row_covariance(resid, w, V0)
        V1 = column_covariance(resid, w, U1)
        trace.append(stack_loglik(stack, ComponentParams(M, U1, V1), w))
        du = np.linalg.norm(U1 - U0)
        dv = np.linalg.norm(V1 - V0)
        logger.debug(f"flip-flop sweep {iterations}: |dU|={du:.3e} |dV|={dv:.3e} loglik={trace[-1]:.6f}")
        if du <= cfg.tolerance and dv <= cfg.tolerance:
            converged = True
            break
        U0, V0 = U1, V1

    if not converged:
        logger.debug(f"flip-flop stopped at max_iter={cfg.max_iter} without meeting tolerance")
    else:
        logger.debug(f"flip-flop converged after {iterations} sweeps")

    params = normalize_scale(ComponentParams(M=M, U=U1, V=V1))
    return FlipFlopResult(params=params, iterations=iterations, converged=converged, loglik_trace=trace)
