"""Reference models: the dense Cholesky GP and sparse regression (SGPR).

The Cholesky model is the exactness oracle for the iterative engine: same
likelihood, same predictive equations, computed by direct factorization.
SGPR optimizes the collapsed variational bound over hyperparameters and
inducing locations jointly; its training loop runs on torch autodiff while
a plain numpy evaluation of the bound is kept alongside for verification.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import kernels
from .errors import NumericError
from .kernels import KernelModel
from .predictor import PredOutput

_CHOLESKY_GUARD_N = 20_000
_LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Dense Cholesky GP.
# ---------------------------------------------------------------------------

@dataclass
class CholeskyModel:
    """Exact GP fitted by dense factorization; O(n^3) time, O(n^2) memory."""

    model: KernelModel
    X: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray
    mll: float
    jitter_added: float = 0.0

    @classmethod
    def fit(cls, model: KernelModel, X, y) -> "CholeskyModel":
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        y = np.asarray(y, dtype=np.float64)
        n = X.shape[0]
        if n > _CHOLESKY_GUARD_N:
            raise ValueError(
                f"dense factorization guard: n={n} exceeds {_CHOLESKY_GUARD_N}")
        K = kernels.kernel_block(model, X, X, add_noise=True)
        jitter = 0.0
        try:
            L = scipy.linalg.cholesky(K, lower=True)
        except scipy.linalg.LinAlgError:
            jitter = 1e-8
            K[np.diag_indices(n)] += jitter
            try:
                L = scipy.linalg.cholesky(K, lower=True)
            except scipy.linalg.LinAlgError as exc:
                raise NumericError(
                    "kernel matrix is not positive definite even with "
                    "1e-8 jitter; consider raising the noise") from exc
        yc = y - model.mean
        alpha = scipy.linalg.cho_solve((L, True), yc)
        mll = (-0.5 * float(yc @ alpha)
               - float(np.sum(np.log(np.diag(L))))
               - 0.5 * n * _LOG_2PI)
        return cls(model=model, X=X, chol=L, alpha=alpha, mll=mll,
                   jitter_added=jitter)

    def predict(self, X_test) -> PredOutput:
        X_test = np.atleast_2d(np.asarray(X_test, dtype=np.float64))
        cross = kernels.kernel_block(self.model, self.X, X_test)
        mean = self.model.mean + cross.T @ self.alpha
        v = scipy.linalg.solve_triangular(self.chol, cross, lower=True)
        var = self.model.outputscale - np.einsum("ij,ij->j", v, v)
        var = np.maximum(var, 1e-12)
        return PredOutput(mean=mean, variance=var,
                          observed_variance=var + self.model.noise)


def cholesky_fit_predict(model: KernelModel, X, y, X_test):
    """Exact likelihood value and predictions in one shot."""
    fitted = CholeskyModel.fit(model, X, y)
    return fitted.mll, fitted.predict(X_test)


def cholesky_mll(model: KernelModel, X, y) -> float:
    """Dense log marginal likelihood, the oracle for the iterative path."""
    return CholeskyModel.fit(model, X, y).mll


def cholesky_logdet(model: KernelModel, X) -> float:
    """Dense log-determinant of the noise-augmented kernel matrix."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    K = kernels.kernel_block(model, X, X, add_noise=True)
    L = scipy.linalg.cholesky(K, lower=True)
    return 2.0 * float(np.sum(np.log(np.diag(L))))


# ---------------------------------------------------------------------------
# SGPR: collapsed variational bound over m inducing points.
# ---------------------------------------------------------------------------

@dataclass
class SgprConfig:
    inducing: int = 512
    adam_steps: int = 100
    adam_lr: float = 0.1
    learn_inducing: bool = True
    jitter: float = 1e-6
    seed: int = 0


@dataclass
class SgprModel:
    """Fitted sparse model: hyperparameters, inducing locations, and the
    training data the posterior conditions on."""

    model: KernelModel
    Z: np.ndarray
    bound: float
    X: np.ndarray
    y: np.ndarray
    jitter: float = 1e-6

    @property
    def m(self) -> int:
        return self.Z.shape[0]

    def predict(self, X_test) -> PredOutput:
        X_test = np.atleast_2d(np.asarray(X_test, dtype=np.float64))
        mean, var = _sgpr_posterior(self.model, self.Z, self.X, self.y, X_test,
                                    jitter=self.jitter)
        return PredOutput(mean=mean, variance=var,
                          observed_variance=var + self.model.noise)


def sgpr_bound(model: KernelModel, Z, X, y, jitter: float = 1e-8) -> float:
    """Collapsed lower bound on the exact log marginal likelihood (numpy).

    Gaussian log-density under the low-rank-plus-noise covariance minus
    the trace regularizer tr(K - Q)/(2 noise). Always at or below the
    dense Cholesky likelihood; equal when Z = X.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    n, m = X.shape[0], Z.shape[0]
    noise = model.noise
    A, LB = _sgpr_terms(model, Z, X, jitter)
    yc = y - model.mean
    c = scipy.linalg.solve_triangular(LB, A @ yc, lower=True)
    logdet = (n - m) * math.log(noise) + 2.0 * float(np.sum(np.log(np.diag(LB))))
    quad = (float(yc @ yc) - float(c @ c)) / noise
    trace_gap = (n * model.outputscale - float(np.sum(A * A))) / (2.0 * noise)
    return -0.5 * (n * _LOG_2PI + logdet + quad) - trace_gap


def _sgpr_terms(model, Z, X, jitter):
    """A = Lzz^{-1} Kzx and the Cholesky factor of B = noise I + A A^T."""
    m = Z.shape[0]
    Kzz = kernels.kernel_block(model, Z, Z)
    Kzz[np.diag_indices(m)] += jitter
    try:
        Lzz = scipy.linalg.cholesky(Kzz, lower=True)
    except scipy.linalg.LinAlgError:
        Kzz[np.diag_indices(m)] += 1e-6
        Lzz = scipy.linalg.cholesky(Kzz, lower=True)
    Kzx = kernels.kernel_block(model, Z, X)
    A = scipy.linalg.solve_triangular(Lzz, Kzx, lower=True)
    B = A @ A.T
    B[np.diag_indices(m)] += model.noise
    LB = scipy.linalg.cholesky(B, lower=True)
    return A, LB


def _sgpr_posterior(model, Z, X, y, X_test, jitter):
    A, LB = _sgpr_terms(model, Z, X, jitter)
    yc = y - model.mean
    c = scipy.linalg.solve_triangular(LB, A @ yc, lower=True)
    m = Z.shape[0]
    Kzz = kernels.kernel_block(model, Z, Z)
    Kzz[np.diag_indices(m)] += jitter
    Lzz = scipy.linalg.cholesky(Kzz, lower=True)
    Kzt = kernels.kernel_block(model, Z, X_test)
    a_star = scipy.linalg.solve_triangular(Lzz, Kzt, lower=True)
    b_star = scipy.linalg.solve_triangular(LB, a_star, lower=True)
    mean = model.mean + b_star.T @ c
    var = (model.outputscale
           - np.einsum("ij,ij->j", a_star, a_star)
           + model.noise * np.einsum("ij,ij->j", b_star, b_star))
    return mean, np.maximum(var, 1e-12)


def sgpr_fit(X, y, config: SgprConfig, *, family: str = "matern32",
             ard: bool = False, noise_floor: float = 0.0) -> SgprModel:
    """Maximize the collapsed bound with Adam over hyperparameters and,
    unless disabled, the inducing locations.

    Inducing points start as a uniformly sampled training subset; the
    torch graph mirrors the numpy bound exactly (softplus transforms,
    noise floor, jitter) so the two routes can be cross-checked.
    """
    import torch

    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    m = min(config.inducing, n)
    rng = np.random.default_rng(config.seed)
    Z0 = X[rng.choice(n, size=m, replace=False)].copy()

    dtype = torch.float64
    Xt = torch.from_numpy(X)
    yt = torch.from_numpy(y)
    n_ls = d if ard else 1
    init = kernels.default_model(family, d, ard=ard, noise_floor=noise_floor,
                                 target_mean=float(np.mean(y)))
    raw0 = kernels.model_to_raw(init)

    raw_s2 = torch.tensor(raw0[0], dtype=dtype, requires_grad=True)
    raw_ls = torch.tensor(raw0[1:1 + n_ls], dtype=dtype, requires_grad=True)
    raw_noise = torch.tensor(raw0[1 + n_ls], dtype=dtype, requires_grad=True)
    mean = torch.tensor(raw0[2 + n_ls], dtype=dtype, requires_grad=True)
    Zt = torch.tensor(Z0, dtype=dtype, requires_grad=config.learn_inducing)

    params = [raw_s2, raw_ls, raw_noise, mean]
    if config.learn_inducing:
        params.append(Zt)
    optimizer = torch.optim.Adam(params, lr=config.adam_lr)

    sqrt3 = math.sqrt(3.0)

    def kernel_t(A, B, s2, ls):
        As, Bs = A / ls, B / ls
        d2 = (As * As).sum(-1, keepdim=True) + (Bs * Bs).sum(-1) - 2.0 * As @ Bs.T
        d2 = torch.clamp(d2, min=0.0)
        if family == "rbf":
            return s2 * torch.exp(-0.5 * d2)
        r = torch.sqrt(d2 + 1e-18)
        return s2 * (1.0 + sqrt3 * r) * torch.exp(-sqrt3 * r)

    def negative_bound():
        s2 = torch.nn.functional.softplus(raw_s2)
        ls = torch.nn.functional.softplus(raw_ls)
        noise = noise_floor + torch.nn.functional.softplus(raw_noise)
        Kzz = kernel_t(Zt, Zt, s2, ls) + config.jitter * torch.eye(m, dtype=dtype)
        Lzz = torch.linalg.cholesky(Kzz)
        Kzx = kernel_t(Zt, Xt, s2, ls)
        A = torch.linalg.solve_triangular(Lzz, Kzx, upper=False)
        B = A @ A.T + noise * torch.eye(m, dtype=dtype)
        LB = torch.linalg.cholesky(B)
        yc = yt - mean
        c = torch.linalg.solve_triangular(LB, (A @ yc).unsqueeze(-1), upper=False)
        logdet = (n - m) * torch.log(noise) + 2.0 * torch.log(torch.diagonal(LB)).sum()
        quad = (yc @ yc - (c * c).sum()) / noise
        trace_gap = (n * s2 - (A * A).sum()) / (2.0 * noise)
        bound = -0.5 * (n * _LOG_2PI + logdet + quad) - trace_gap
        return -bound

    for _ in range(config.adam_steps):
        optimizer.zero_grad()
        loss = negative_bound()
        loss.backward()
        optimizer.step()

    with torch.no_grad():
        final_model = KernelModel(
            family=family,
            outputscale=float(torch.nn.functional.softplus(raw_s2)),
            lengthscales=torch.nn.functional.softplus(raw_ls).numpy().copy(),
            noise=noise_floor + float(torch.nn.functional.softplus(raw_noise)),
            mean=float(mean),
            noise_floor=noise_floor,
        )
        Z_final = Zt.numpy().copy()

    return SgprModel(model=final_model, Z=Z_final,
                     bound=sgpr_bound(final_model, Z_final, X, y,
                                      jitter=config.jitter),
                     X=X, y=y, jitter=config.jitter)
