"""
Dense symmetric linear algebra for covariance work.

All arithmetic is float64. Single matrices travel as `SymMatrix`/`CholFactor`;
stacks of per-sample matrices are plain `(B, n, n)` arrays and go through the
`batch_*` helpers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Union

import numpy as np
import scipy.linalg as sla
from numpy.typing import ArrayLike
from scipy.special import expit

logger = logging.getLogger(__name__)

# Floor added to softplus-mapped diagonals of parameterized factors.
EPS_MIN = 1e-6
# Jitter policy: up to JITTER_RETRIES additions of JITTER_SCALE * mean(diag).
JITTER_SCALE = 1e-6
JITTER_RETRIES = 3


class LinalgError(Exception):
    pass


class NotPositiveDefinite(LinalgError):
    """A non-positive pivot was met; the caller should re-jitter the matrix."""


class ShapeMismatch(LinalgError, ValueError):
    pass


class SingularObservedBlock(LinalgError):
    """The observed block of a covariance stayed singular after jitter retries."""


@dataclass(frozen=True)
class SymMatrix:
    entries: np.ndarray

    def __post_init__(self) -> None:
        a = np.array(self.entries, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
            raise ShapeMismatch(f"SymMatrix needs a non-empty square matrix, got shape {a.shape}")
        a = 0.5 * (a + a.T)
        a.setflags(write=False)
        object.__setattr__(self, "entries", a)

    @property
    def dim(self) -> int:
        return int(self.entries.shape[0])

    @classmethod
    def identity(cls, n: int) -> SymMatrix:
        return cls(np.eye(n))

    @classmethod
    def diag(cls, values: ArrayLike) -> SymMatrix:
        return cls(np.diag(np.asarray(values, dtype=np.float64)))


@dataclass(frozen=True)
class CholFactor:
    lower: np.ndarray

    def __post_init__(self) -> None:
        low = np.array(self.lower, dtype=np.float64)
        low.setflags(write=False)
        object.__setattr__(self, "lower", low)

    @property
    def dim(self) -> int:
        return int(self.lower.shape[0])

    def reconstruct(self) -> np.ndarray:
        return self.lower @ self.lower.T


@dataclass(frozen=True)
class ConditionSpec:
    observed_indices: tuple[int, ...]
    observed_values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        idx = tuple(int(i) for i in self.observed_indices)
        vals = np.asarray(self.observed_values, dtype=np.float64).reshape(-1)
        if len(set(idx)) != len(idx):
            raise ValueError(f"Observed indices must be distinct: {idx}")
        if vals.shape[0] != len(idx):
            raise ShapeMismatch(f"{len(idx)} observed indices but {vals.shape[0]} values")
        object.__setattr__(self, "observed_indices", idx)
        object.__setattr__(self, "observed_values", vals)

    def hidden_indices(self, dim: int) -> tuple[int, ...]:
        if any(i < 0 or i >= dim for i in self.observed_indices):
            raise ValueError(f"Observed indices {self.observed_indices} out of range for dim={dim}")
        hidden = tuple(i for i in range(dim) if i not in set(self.observed_indices))
        if not hidden:
            raise ValueError("At least one dimension must stay unobserved")
        return hidden


Matrix = Union[SymMatrix, ArrayLike]


def _entries(m: Matrix) -> np.ndarray:
    if isinstance(m, SymMatrix):
        return m.entries
    return SymMatrix(np.asarray(m, dtype=np.float64)).entries


def softplus(x: ArrayLike) -> np.ndarray:
    return np.logaddexp(0.0, np.asarray(x, dtype=np.float64))


def cholesky(m: Matrix) -> CholFactor:
    a = _entries(m)
    try:
        low = sla.cholesky(a, lower=True, check_finite=True)
    except (sla.LinAlgError, ValueError) as e:
        raise NotPositiveDefinite(f"Cholesky failed for {a.shape[0]}x{a.shape[0]} matrix: {e}") from e
    if not np.all(np.diag(low) > 0.0):
        raise NotPositiveDefinite("Cholesky produced a non-positive pivot")
    return CholFactor(low)


def jittered_cholesky(m: Matrix, retries: int = JITTER_RETRIES) -> CholFactor:
    a = _entries(m)
    try:
        return cholesky(a)
    except NotPositiveDefinite:
        pass

    step = JITTER_SCALE * float(np.mean(np.diag(a)))
    if not step > 0.0:
        step = JITTER_SCALE
    work = np.array(a)
    for attempt in range(1, retries + 1):
        work[np.diag_indices_from(work)] += step
        try:
            factor = cholesky(work)
            logger.warning("Cholesky needed jitter. attempt=%d added=%.3e dim=%d", attempt, step * attempt, a.shape[0])
            return factor
        except NotPositiveDefinite:
            continue
    raise NotPositiveDefinite(f"Matrix not positive definite after {retries} jitter retries")


def log_det(f: CholFactor) -> float:
    return float(2.0 * np.sum(np.log(np.diag(f.lower))))


def solve(f: CholFactor, b: ArrayLike) -> np.ndarray:
    rhs = np.asarray(b, dtype=np.float64)
    if rhs.ndim not in (1, 2) or rhs.shape[0] != f.dim:
        raise ShapeMismatch(f"Right-hand side shape {rhs.shape} incompatible with dim={f.dim}")
    return sla.cho_solve((f.lower, True), rhs, check_finite=False)


def tril_size(n: int) -> int:
    return n * (n + 1) // 2


def dim_from_tril_size(k: int) -> int:
    n = int((np.sqrt(8 * k + 1) - 1) // 2)
    if n < 1 or tril_size(n) != k:
        raise ShapeMismatch(f"{k} is not a triangular number n(n+1)/2")
    return n


def lower_from_raw(raw: ArrayLike) -> np.ndarray:
    """
    Map unconstrained values (..., n(n+1)/2) to lower factors (..., n, n).

    Row-major lower-triangle order; the diagonal goes through softplus + EPS_MIN,
    off-diagonals are used as-is.
    """
    r = np.asarray(raw, dtype=np.float64)
    n = dim_from_tril_size(r.shape[-1])
    rows, cols = np.tril_indices(n)
    low = np.zeros(r.shape[:-1] + (n, n))
    vals = np.where(rows == cols, softplus(r) + EPS_MIN, r)
    low[..., rows, cols] = vals
    return low


def assemble_pd(raw_lower: ArrayLike, jitter: float = 0.0) -> SymMatrix:
    r = np.asarray(raw_lower, dtype=np.float64)
    if r.ndim != 1:
        raise ShapeMismatch(f"assemble_pd expects a vector, got shape {r.shape}")
    if jitter < 0:
        raise ValueError("jitter must be >= 0")
    low = lower_from_raw(r)
    return SymMatrix(low @ low.T + jitter * np.eye(low.shape[0]))


def assemble_pd_batch(raw_lower: ArrayLike) -> tuple[np.ndarray, np.ndarray]:
    """Returns (lower factors, covariances) for a stack of raw vectors."""
    low = lower_from_raw(raw_lower)
    return low, low @ np.swapaxes(low, -1, -2)


def assemble_pd_backward(raw_lower: ArrayLike, lower: np.ndarray, grad_cov: np.ndarray) -> np.ndarray:
    """
    Chain ∂loss/∂(L·Lᵀ) back to the raw vector that produced L.

    grad_cov must be symmetric; then ∂loss/∂L = 2·G·L restricted to the lower triangle.
    """
    r = np.asarray(raw_lower, dtype=np.float64)
    n = lower.shape[-1]
    rows, cols = np.tril_indices(n)
    g_lower = 2.0 * (grad_cov @ lower)
    g = g_lower[..., rows, cols]
    return np.where(rows == cols, g * expit(r), g)


def condition_gaussian(mean: ArrayLike, cov: Matrix, spec: ConditionSpec) -> tuple[np.ndarray, SymMatrix]:
    mu = np.asarray(mean, dtype=np.float64).reshape(-1)
    s = _entries(cov)
    if s.shape[0] != mu.shape[0]:
        raise ShapeMismatch(f"mean has {mu.shape[0]} entries but cov is {s.shape[0]}x{s.shape[0]}")
    hidden = list(spec.hidden_indices(mu.shape[0]))
    observed = list(spec.observed_indices)

    s11 = s[np.ix_(hidden, hidden)]
    if not observed:
        return mu[hidden], SymMatrix(s11)
    s12 = s[np.ix_(hidden, observed)]
    s22 = s[np.ix_(observed, observed)]
    try:
        f22 = jittered_cholesky(s22)
    except NotPositiveDefinite as e:
        raise SingularObservedBlock(str(e)) from e

    # gain = Σ12 Σ22⁻¹
    gain = solve(f22, s12.T).T
    cond_mean = mu[hidden] + gain @ (spec.observed_values - mu[observed])
    cond_cov = s11 - gain @ s12.T
    return cond_mean, SymMatrix(cond_cov)


def min_eigenvalue(m: Matrix) -> float:
    a = _entries(m)
    return float(sla.eigvalsh(a, subset_by_index=[0, 0])[0])


def batch_cholesky(stack: np.ndarray, retries: int = JITTER_RETRIES) -> np.ndarray:
    """Lower factors for a (B, n, n) stack; falls back to the jitter policy per sample."""
    try:
        return np.linalg.cholesky(stack)
    except np.linalg.LinAlgError:
        pass
    out = np.empty_like(stack)
    for i in range(stack.shape[0]):
        out[i] = jittered_cholesky(stack[i], retries=retries).lower
    return out


def batch_log_det(lower: np.ndarray) -> np.ndarray:
    return 2.0 * np.sum(np.log(np.diagonal(lower, axis1=-2, axis2=-1)), axis=-1)


def batch_inverse_from_factor(lower: np.ndarray) -> np.ndarray:
    n = lower.shape[-1]
    eye = np.broadcast_to(np.eye(n), lower.shape)
    linv = np.linalg.solve(lower, eye)
    return np.swapaxes(linv, -1, -2) @ linv
