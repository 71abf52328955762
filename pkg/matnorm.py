"""
Matrix normal distribution primitives

A matrix Y (r x p) is MN(M, U, V) iff vec(Y) ~ N(vec(M), V kron U).
Densities are evaluated through Cholesky factors of U and V separately;
the rp x rp Kronecker covariance is only materialized for test oracles.
"""
import math
from dataclasses import dataclass
from typing import List

import numpy as np
from scipy import linalg

from errors import DimensionMismatch, NotPositiveDefinite, SizeGuardExceeded, ValidationError
from logger import get_logger

logger = get_logger(__name__)

# r x p float array, one observation
MatrixSample = np.ndarray
# n x r x p float array, the dataset
MatrixStack = np.ndarray
# 64-bit unsigned
RandomSeed = int

KRON_SIZE_GUARD = 4096
SYMMETRY_RTOL = 1e-10
LOG_2PI = math.log(2.0 * math.pi)


def _frozen(a) -> np.ndarray:
    out = np.array(a, dtype=float, copy=True)
    out.setflags(write=False)
    return out


def _check_symmetric(mat: np.ndarray, name: str):
    scale = max(1.0, float(np.abs(mat).max()))
    if np.abs(mat - mat.T).max() > SYMMETRY_RTOL * scale:
        raise ValidationError(f"{name} is not symmetric")


@dataclass(frozen=True, eq=False)
class ComponentParams:
    """Mean M (r x p), row covariance U (r x r), column covariance V (p x p)"""
    M: np.ndarray
    U: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        M, U, V = _frozen(self.M), _frozen(self.U), _frozen(self.V)
        if M.ndim != 2:
            raise DimensionMismatch(f"M must be a matrix, got shape {M.shape}")
        r, p = M.shape
        if r < 1 or p < 1:
            raise DimensionMismatch("M must have at least one row and one column")
        if U.shape != (r, r):
            raise DimensionMismatch(f"U has shape {U.shape}, expected {(r, r)}")
        if V.shape != (p, p):
            raise DimensionMismatch(f"V has shape {V.shape}, expected {(p, p)}")
        for name, mat in (("M", M), ("U", U), ("V", V)):
            if not np.all(np.isfinite(mat)):
                raise ValidationError(f"{name} has non-finite entries")
        _check_symmetric(U, "U")
        _check_symmetric(V, "V")
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "V", V)

    @property
    def r(self) -> int:
        return self.M.shape[0]

    @property
    def p(self) -> int:
        return self.M.shape[1]


def as_stack(data) -> MatrixStack:
    """Coerce to an n x r x p float array and check it"""
    stack = np.asarray(data, dtype=float)
    if stack.ndim == 2:
        stack = stack[None, :, :]
    if stack.ndim != 3 or min(stack.shape) < 1:
        raise DimensionMismatch(f"Expected a stack of matrices, got shape {stack.shape}")
    if not np.all(np.isfinite(stack)):
        raise ValidationError("Matrix stack has non-finite entries")
    return stack


def derive_seeds(seed: RandomSeed, count: int) -> List[RandomSeed]:
    """Deterministic child seeds (64-bit) from a base seed"""
    state = np.random.SeedSequence(int(seed)).generate_state(count, dtype=np.uint64)
    return [int(s) for s in state]


def cholesky_factor(mat: np.ndarray, name: str = "covariance") -> np.ndarray:
    """Lower Cholesky factor, NotPositiveDefinite on failure"""
    try:
        return linalg.cholesky(mat, lower=True)
    except linalg.LinAlgError as e:
        raise NotPositiveDefinite(f"{name} is not positive definite") from e


def _check_dims(stack: MatrixStack, theta: ComponentParams):
    if stack.shape[1:] != theta.M.shape:
        raise DimensionMismatch(
            f"Samples are {stack.shape[1]}x{stack.shape[2]}, "
            f"parameters are {theta.r}x{theta.p}"
        )


def matnorm_logpdf_stack(stack: MatrixStack, theta: ComponentParams) -> np.ndarray:
    """Log-density of every sample in the stack, shape (n,)"""
    stack = as_stack(stack)
    _check_dims(stack, theta)
    n, r, p = stack.shape
    lu = cholesky_factor(theta.U, "U")
    lv = cholesky_factor(theta.V, "V")

    # quad_i = || Lu^-1 (Y_i - M) Lv^-T ||_F^2
    resid = stack - theta.M
    a = linalg.solve_triangular(lu, resid.transpose(1, 0, 2).reshape(r, n * p), lower=True)
    a = a.reshape(r, n, p).transpose(2, 1, 0).reshape(p, n * r)
    b = linalg.solve_triangular(lv, a, lower=True).reshape(p, n, r)
    quad = np.einsum("inj,inj->n", b, b)

    logdet_u = 2.0 * np.log(np.diag(lu)).sum()
    logdet_v = 2.0 * np.log(np.diag(lv)).sum()
    const = -0.5 * r * p * LOG_2PI - 0.5 * r * logdet_v - 0.5 * p * logdet_u
    return const - 0.5 * quad


def matnorm_logpdf(Y: MatrixSample, theta: ComponentParams) -> float:
    """log f(Y | M, U, V) in nats"""
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2:
        raise DimensionMismatch(f"Sample must be a matrix, got shape {Y.shape}")
    return float(matnorm_logpdf_stack(Y[None, :, :], theta)[0])


def matnorm_sample(theta: ComponentParams, n: int, seed: RandomSeed) -> MatrixStack:
    """n independent draws M + A Z B^T with A A^T = U, B B^T = V"""
    if n < 1:
        raise ValidationError("n must be at least 1")
    lu = cholesky_factor(theta.U, "U")
    lv = cholesky_factor(theta.V, "V")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, theta.r, theta.p))
    return theta.M + lu @ z @ lv.T


def kron_covariance(theta: ComponentParams) -> np.ndarray:
    """V kron U, the covariance of vec(Y); oracle use only"""
    size = theta.r * theta.p
    if size > KRON_SIZE_GUARD:
        raise SizeGuardExceeded(f"r*p = {size} exceeds {KRON_SIZE_GUARD}")
    return np.kron(theta.V, theta.U)


def normalize_scale(theta: ComponentParams) -> ComponentParams:
    """Rescale to (M, cU, V/c) with trace(cU) = r"""
    c = theta.r / float(np.trace(theta.U))
    if abs(c - 1.0) <= 1e-12:
        return theta
    return ComponentParams(M=theta.M, U=theta.U * c, V=theta.V / c)
