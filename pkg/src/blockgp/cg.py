"""Batched preconditioned conjugate gradients with Lanczos extraction.

Solves an SPD system for several right-hand sides at once against a
black-box multiply, tracking per-column convergence on the true relative
residual. The recurrence coefficients of each column are folded into a
symmetric tridiagonal matrix whose quadrature yields log-determinant
estimates (stochastic Lanczos quadrature) when the columns are random
probes.

Beyond the multiply, the solver keeps four vector blocks per right-hand
side (iterate, residual, search direction, preconditioned residual), so
its own memory is O(n t).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import NumericError
from .precond import PreconditionerCache, precond_apply


@dataclass
class SolveRequest:
    """One batched solve: rhs columns, relative-residual tolerance,
    iteration cap, and an optional preconditioner."""

    rhs: np.ndarray
    tolerance: float
    max_iters: int = 1000
    preconditioner: PreconditionerCache | None = None

    def __post_init__(self):
        self.rhs = np.asarray(self.rhs, dtype=np.float64)
        if self.rhs.ndim == 1:
            self.rhs = self.rhs[:, None]
        if self.rhs.ndim != 2:
            raise ValueError("rhs must be a vector or a matrix of columns")
        if not self.tolerance > 0:
            raise ValueError(f"tolerance must be positive, got {self.tolerance}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        norms = np.linalg.norm(self.rhs, axis=0)
        if np.any(norms == 0):
            raise ValueError("every right-hand-side column must be non-zero")


@dataclass(frozen=True)
class Tridiagonal:
    """Symmetric tridiagonal recurrence matrix for one solve column."""

    diag: np.ndarray
    offdiag: np.ndarray

    @property
    def order(self) -> int:
        return self.diag.shape[0]

    def dense(self) -> np.ndarray:
        T = np.diag(self.diag)
        if self.offdiag.size:
            idx = np.arange(self.offdiag.size)
            T[idx, idx + 1] = self.offdiag
            T[idx + 1, idx] = self.offdiag
        return T


@dataclass
class SolveReport:
    """Solutions plus convergence and recurrence diagnostics."""

    solutions: np.ndarray
    final_relative_residuals: np.ndarray
    iterations: int
    tridiagonals: list[Tridiagonal]
    converged: np.ndarray
    residual_history: np.ndarray = field(repr=False)


def mbcg_solve(mvm, request: SolveRequest) -> SolveReport:
    """Run batched PCG until every column meets the tolerance or the cap.

    Parameters
    ----------
    mvm : callable(ndarray (n, j)) -> ndarray (n, j)
        Applies the SPD operator to a block of columns.
    request : SolveRequest

    Columns that converge are frozen: they receive no further updates and
    their tridiagonals stop growing while the rest of the batch continues.
    Convergence is measured on the true residual norm relative to the
    right-hand side, independent of any preconditioner.
    """
    B = request.rhs
    n, t = B.shape
    precond = request.preconditioner

    norms = np.linalg.norm(B, axis=0)
    U = np.zeros_like(B)
    R = B.copy()
    Z = precond_apply(precond, R) if precond is not None else R.copy()
    P = Z.copy()
    gamma = np.einsum("ij,ij->j", R, Z)

    active = np.ones(t, dtype=bool)
    converged = np.zeros(t, dtype=bool)
    alphas: list[list[float]] = [[] for _ in range(t)]
    betas: list[list[float]] = [[] for _ in range(t)]
    history = []

    rel = np.ones(t)
    iterations = 0
    for iteration in range(1, request.max_iters + 1):
        cols = np.flatnonzero(active)
        V = mvm(P[:, cols])
        pv = np.einsum("ij,ij->j", P[:, cols], V)
        if np.any(pv <= 0) or not np.all(np.isfinite(pv)):
            bad = cols[np.flatnonzero((pv <= 0) | ~np.isfinite(pv))[0]]
            raise NumericError(
                f"operator is not positive definite: p^T A p <= 0 for "
                f"column {bad} at iteration {iteration}"
            )
        alpha = gamma[cols] / pv
        U[:, cols] += alpha * P[:, cols]
        R[:, cols] -= alpha * V
        iterations = iteration
        for j, a in zip(cols, alpha):
            alphas[j].append(float(a))

        rel = rel.copy()
        rel[cols] = np.linalg.norm(R[:, cols], axis=0) / norms[cols]
        history.append(rel)

        done = rel[cols] <= request.tolerance
        newly = cols[done]
        converged[newly] = True
        active[newly] = False
        if not active.any():
            break

        keep = np.flatnonzero(active)
        Zk = precond_apply(precond, R[:, keep]) if precond is not None else R[:, keep]
        gamma_new = np.einsum("ij,ij->j", R[:, keep], Zk)
        beta = gamma_new / gamma[keep]
        P[:, keep] = Zk + beta * P[:, keep]
        gamma[keep] = gamma_new
        for j, b in zip(keep, beta):
            betas[j].append(float(b))

    tridiagonals = [
        _tridiagonal_from_coefficients(alphas[j], betas[j]) for j in range(t)
    ]
    return SolveReport(
        solutions=U,
        final_relative_residuals=rel,
        iterations=iterations,
        tridiagonals=tridiagonals,
        converged=converged,
        residual_history=np.array(history) if history else np.zeros((0, t)),
    )


def _tridiagonal_from_coefficients(alphas, betas) -> Tridiagonal:
    """Fold CG step sizes and direction updates into the Lanczos matrix of
    the (preconditioned) operator started from the normalized column."""
    m = len(alphas)
    diag = np.empty(m)
    offdiag = np.empty(max(m - 1, 0))
    for i in range(m):
        diag[i] = 1.0 / alphas[i]
        if i > 0:
            diag[i] += betas[i - 1] / alphas[i - 1]
        if i < m - 1:
            offdiag[i] = math.sqrt(betas[i]) / alphas[i]
    return Tridiagonal(diag=diag, offdiag=offdiag)


def slq_logdet(report: SolveReport, preconditioner: PreconditionerCache | None = None,
               columns=None) -> float:
    """Log-determinant estimate from a solve over Gaussian probe columns.

    Averages the first-component quadrature of log over each column's
    tridiagonal, scaled by the matrix size, and adds the preconditioner's
    exact log-determinant when one was used (probes must then have been
    drawn with covariance P; see precond_sample). Without a preconditioner
    probes are standard normal and the added term is zero.
    """
    if columns is None:
        columns = range(len(report.tridiagonals))
    columns = list(columns)
    if not columns:
        raise ValueError("at least one probe column is required")
    n = report.solutions.shape[0]
    total = 0.0
    for j in columns:
        T = report.tridiagonals[j]
        if T.order == 0:
            raise NumericError(f"column {j} has an empty recurrence")
        if T.order == 1:
            eigvals = T.diag.copy()
            weights = np.ones(1)
        else:
            eigvals, vecs = scipy.linalg.eigh_tridiagonal(T.diag, T.offdiag)
            weights = vecs[0, :] ** 2
        if np.any(eigvals <= 0):
            raise NumericError(
                f"tridiagonal for column {j} has a non-positive eigenvalue; "
                "the operator is not positive definite or the recurrence broke down"
            )
        total += float(weights @ np.log(eigvals))
    estimate = n * total / len(columns)
    if preconditioner is not None:
        estimate += preconditioner.logdet
    return estimate
