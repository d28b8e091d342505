"""Low-rank preconditioning via partial pivoted Cholesky.

A rank-k factor L of the noiseless kernel matrix is built greedily from k
kernel rows. The preconditioner P = L L^T + noise * I is applied through
the Woodbury identity and exposes its exact log-determinant, so it can
also serve as the deterministic part of log-determinant estimates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import NumericError


@dataclass(frozen=True)
class PivotedFactor:
    """Rank-k factor of a PSD matrix from greedy diagonal pivoting.

    After j steps K - L_j L_j^T has residual_diag on its diagonal; the
    residual trace never increases with j.
    """

    factor: np.ndarray        # (n, k)
    pivots: np.ndarray        # (k,) row indices used, in order
    residual_diag: np.ndarray  # (n,) remaining diagonal mass, clamped at 0

    @property
    def rank(self) -> int:
        return self.factor.shape[1]


@dataclass(frozen=True)
class PreconditionerCache:
    """P = factor factor^T + noise I, ready for inverse products.

    inner_chol is the lower Cholesky factor of (noise I_k + L^T L); logdet
    is log det P computed from it:
    (n - k) log(noise) + 2 sum(log(diag(inner_chol)))."""

    factor: np.ndarray
    noise: float
    inner_chol: np.ndarray
    logdet: float

    @property
    def n(self) -> int:
        return self.factor.shape[0]

    @property
    def rank(self) -> int:
        return self.factor.shape[1]


def partial_pivoted_cholesky(row_fn, diag: np.ndarray, k: int) -> PivotedFactor:
    """Greedy rank-k pivoted Cholesky of a PSD matrix given by rows.

    Parameters
    ----------
    row_fn : callable(i) -> ndarray
        Returns row i of the (noiseless) matrix, length n.
    diag : ndarray
        The matrix diagonal.
    k : requested rank, 1 <= k <= n. If the residual diagonal hits zero
        early the factor is returned at the achieved rank.

    Each step pivots on the largest remaining diagonal entry; round-off
    negatives are clamped to zero and excluded from pivoting.
    """
    diag = np.asarray(diag, dtype=np.float64)
    n = diag.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"rank must satisfy 1 <= k <= {n}, got {k}")
    d = diag.copy()
    L = np.zeros((n, k))
    pivots = np.empty(k, dtype=np.intp)
    for j in range(k):
        i = int(np.argmax(d))
        if d[i] <= 0.0:
            return PivotedFactor(
                factor=L[:, :j].copy(),
                pivots=pivots[:j].copy(),
                residual_diag=np.maximum(d, 0.0),
            )
        pivots[j] = i
        row = np.asarray(row_fn(i), dtype=np.float64)
        if row.shape != (n,):
            raise ValueError(f"row oracle returned shape {row.shape}, expected ({n},)")
        col = row - L[:, :j] @ L[i, :j]
        col /= np.sqrt(d[i])
        L[:, j] = col
        d -= col * col
        np.maximum(d, 0.0, out=d)
        d[i] = 0.0
    return PivotedFactor(factor=L, pivots=pivots, residual_diag=d)


def build_preconditioner(factor: PivotedFactor | np.ndarray, noise: float) -> PreconditionerCache:
    """Assemble the Woodbury cache for P = L L^T + noise I."""
    if noise <= 0:
        raise ValueError(f"noise must be positive, got {noise}")
    L = factor.factor if isinstance(factor, PivotedFactor) else np.asarray(factor, dtype=np.float64)
    n, k = L.shape
    if k == 0:
        return PreconditionerCache(
            factor=L, noise=float(noise), inner_chol=np.zeros((0, 0)),
            logdet=n * float(np.log(noise)),
        )
    inner = L.T @ L
    inner[np.diag_indices(k)] += noise
    try:
        chol = scipy.linalg.cholesky(inner, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise NumericError(
            "inner factorization of the preconditioner failed; "
            "the factor is non-finite or the noise is not positive"
        ) from exc
    logdet = (n - k) * float(np.log(noise)) + 2.0 * float(np.sum(np.log(np.diag(chol))))
    return PreconditionerCache(factor=L, noise=float(noise), inner_chol=chol, logdet=logdet)


def precond_apply(cache: PreconditionerCache, V: np.ndarray) -> np.ndarray:
    """P^{-1} V via the Woodbury identity; costs O(n k t)."""
    V = np.asarray(V, dtype=np.float64)
    squeeze = V.ndim == 1
    if squeeze:
        V = V[:, None]
    if V.shape[0] != cache.n:
        raise ValueError(f"V has {V.shape[0]} rows, preconditioner expects {cache.n}")
    if cache.rank == 0:
        out = V / cache.noise
    else:
        LtV = cache.factor.T @ V
        inner_solve = scipy.linalg.cho_solve((cache.inner_chol, True), LtV)
        out = (V - cache.factor @ inner_solve) / cache.noise
    return out[:, 0] if squeeze else out


def precond_matmul(cache: PreconditionerCache, V: np.ndarray) -> np.ndarray:
    """P V, mostly useful for verification."""
    V = np.asarray(V, dtype=np.float64)
    if cache.rank == 0:
        return cache.noise * V
    return cache.factor @ (cache.factor.T @ V) + cache.noise * V


def precond_sample(cache: PreconditionerCache, rng: np.random.Generator,
                   t: int) -> np.ndarray:
    """Draw t Gaussian vectors with covariance P, as L z1 + sqrt(noise) z2.

    The draw order (rank-sized block first, then the n-sized block) is
    fixed so a seed fully determines the sample.
    """
    z1 = rng.standard_normal((cache.rank, t))
    z2 = rng.standard_normal((cache.n, t))
    out = np.sqrt(cache.noise) * z2
    if cache.rank:
        out += cache.factor @ z1
    return out


def precond_inverse_quadratic_trace(cache: PreconditionerCache) -> float:
    """tr(P^{-1}) in O(k^3 + k^2): noise^{-1} (n - tr(B^{-1} L^T L)) with
    B = noise I + L^T L, using tr(B^{-1} L^T L) = k - noise tr(B^{-1})."""
    if cache.rank == 0:
        return cache.n / cache.noise
    inv_chol = scipy.linalg.solve_triangular(
        cache.inner_chol, np.eye(cache.rank), lower=True)
    tr_B_inv = float(np.sum(inv_chol * inv_chol))
    tr_BinvLtL = cache.rank - cache.noise * tr_B_inv
    return (cache.n - tr_BinvLtL) / cache.noise


def precond_weighted_trace(cache: PreconditionerCache, GL: np.ndarray,
                           trace_G: float) -> float:
    """tr(P^{-1} G) given G @ L and tr(G):
    noise^{-1} (tr(G) - tr(B^{-1} L^T (G L)))."""
    if cache.rank == 0:
        return trace_G / cache.noise
    LtGL = cache.factor.T @ GL
    inner_solve = scipy.linalg.cho_solve((cache.inner_chol, True), LtGL)
    return (trace_G - float(np.trace(inner_solve))) / cache.noise
