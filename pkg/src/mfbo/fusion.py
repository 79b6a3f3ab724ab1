"""Nonlinear two-fidelity fusion model.

The high-fidelity surrogate is a GP over the augmented input
(x, m_l(x)) where m_l is the low-fidelity model's standardized
posterior mean.  Its kernel is a product of one SE kernel acting on
the fused low-fidelity coordinate and one acting on the design
variables, plus an additive SE bias term:

    k((x, s), (x', s')) = k1(s, s') * k2(x, x') + k3(x, x')

Prediction propagates the low-fidelity posterior through the high GP
by Monte Carlo and combines the sample moments with the law of total
variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Tuple

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from mfbo.gp import (
    ContractViolation,
    FitConfig,
    GpModel,
    Hyperparameters,
    PosteriorGaussian,
    TrainingSet,
    _minimize_restarts,
    _nlml_from_chol,
    _se_cross,
    chol_with_jitter,
    predict_batch,
)

# Rows per internal GP predict call when chunking large MC batches.
_CHUNK_ROWS = 65536


class FidelityLevel(Enum):
    LOW = "low"
    HIGH = "high"


@dataclass(frozen=True)
class McConfig:
    """Monte Carlo settings for posterior propagation."""

    n_samples: int = 128
    seed: int = 0


@dataclass(frozen=True)
class MfHyperparameters:
    """Hyperparameters of the composite high-fidelity kernel.

    ``theta_h1`` acts on the fused low-fidelity output coordinate (1-d),
    ``theta_h2`` and ``theta_h3`` act on the design variables (d-dim).
    The component noise fields are unused; a single shared noise level
    ``log_sigma_n`` enters the training covariance diagonal.
    """

    theta_h1: Hyperparameters
    theta_h2: Hyperparameters
    theta_h3: Hyperparameters
    log_sigma_n: float

    @property
    def sigma_n(self) -> float:
        return math.exp(self.log_sigma_n)

    @property
    def dim(self) -> int:
        return self.theta_h2.dim

    def to_vector(self) -> np.ndarray:
        """Pack as [log_sigma_n, sf1, l1, sf2, l2..., sf3, l3...] (logs)."""
        return np.concatenate((
            [self.log_sigma_n],
            [self.theta_h1.log_sigma_f], self.theta_h1.log_lengthscales,
            [self.theta_h2.log_sigma_f], self.theta_h2.log_lengthscales,
            [self.theta_h3.log_sigma_f], self.theta_h3.log_lengthscales,
        ))

    @classmethod
    def from_vector(cls, vec: np.ndarray, dim: int) -> "MfHyperparameters":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (2 * dim + 5,):
            raise ContractViolation(f"expected vector of length {2 * dim + 5}, got {vec.shape}")
        log_n = float(vec[0])
        h1 = Hyperparameters(log_n, float(vec[1]), vec[2:3].copy())
        h2 = Hyperparameters(log_n, float(vec[3]), vec[4:4 + dim].copy())
        h3 = Hyperparameters(log_n, float(vec[4 + dim]), vec[5 + dim:5 + 2 * dim].copy())
        return cls(h1, h2, h3, log_n)

    @classmethod
    def default(cls, dim: int) -> "MfHyperparameters":
        log_n = math.log(1e-2)
        h1 = Hyperparameters(log_n, 0.0, np.log(np.full(1, 1.0)))
        h2 = Hyperparameters(log_n, 0.0, np.log(np.full(dim, 0.5)))
        h3 = Hyperparameters(log_n, math.log(0.3), np.log(np.full(dim, 0.5)))
        return cls(h1, h2, h3, log_n)


def kernel_mf(u1, u2, theta: MfHyperparameters) -> float:
    """Composite kernel between two augmented points (x..., s)."""
    a = np.atleast_1d(np.asarray(u1, dtype=float))
    b = np.atleast_1d(np.asarray(u2, dtype=float))
    d = theta.dim
    if a.shape != (d + 1,) or b.shape != (d + 1,):
        raise ContractViolation(f"augmented points must have shape ({d + 1},)")
    from mfbo.gp import kernel_se

    k1 = kernel_se(a[-1:], b[-1:], theta.theta_h1)
    k2 = kernel_se(a[:d], b[:d], theta.theta_h2)
    k3 = kernel_se(a[:d], b[:d], theta.theta_h3)
    return k1 * k2 + k3


def _mf_cross(Ua: np.ndarray, Ub: np.ndarray, theta: MfHyperparameters) -> np.ndarray:
    d = theta.dim
    k1 = _se_cross(Ua[:, d:], Ub[:, d:], theta.theta_h1.sigma_f, theta.theta_h1.lengthscales)
    k2 = _se_cross(Ua[:, :d], Ub[:, :d], theta.theta_h2.sigma_f, theta.theta_h2.lengthscales)
    k3 = _se_cross(Ua[:, :d], Ub[:, :d], theta.theta_h3.sigma_f, theta.theta_h3.lengthscales)
    return k1 * k2 + k3


def covariance_matrix_mf(U: np.ndarray, theta: MfHyperparameters,
                         with_noise: bool = True) -> np.ndarray:
    """Training covariance over augmented inputs, optionally plus noise."""
    U = np.atleast_2d(np.asarray(U, dtype=float))
    if U.shape[1] != theta.dim + 1:
        raise ContractViolation(f"augmented inputs have {U.shape[1]} columns, expected {theta.dim + 1}")
    K = _mf_cross(U, U, theta)
    if with_noise:
        K = K + theta.sigma_n**2 * np.eye(U.shape[0])
    return K


@dataclass(frozen=True)
class MfModel:
    """Fitted fusion model: the low GP plus the augmented-input high GP."""

    low: GpModel
    x_inputs: np.ndarray
    aug_inputs: np.ndarray
    targets_raw: np.ndarray
    target_mean: float
    target_std: float
    theta: MfHyperparameters
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float
    nlml_value: float
    restarts: tuple = ()

    @property
    def n(self) -> int:
        return self.aug_inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.x_inputs.shape[1]

    def high_posterior(self, U: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Standardized posterior of the augmented-input GP at rows of ``U``.

        Exposed so audits and tests can drive the Monte Carlo propagation
        step independently.  Returns (mean_std, variance_std).
        """
        U = np.atleast_2d(np.asarray(U, dtype=float))
        theta = self.theta
        Ks = _mf_cross(U, self.aug_inputs, theta)
        mean_std = Ks @ self.alpha
        V = solve_triangular(self.chol, Ks.T, lower=True, check_finite=False)
        prior_diag = theta.theta_h1.sigma_f**2 * theta.theta_h2.sigma_f**2 + theta.theta_h3.sigma_f**2
        var_std = theta.sigma_n**2 + prior_diag - np.einsum("ij,ij->j", V, V)
        return mean_std, np.maximum(var_std, 0.0)


def _mf_nlml_value_and_grad(U: np.ndarray, y: np.ndarray,
                            theta: MfHyperparameters) -> Tuple[float, np.ndarray]:
    d = theta.dim
    n = U.shape[0]
    X, s = U[:, :d], U[:, d:]
    K1 = _se_cross(s, s, theta.theta_h1.sigma_f, theta.theta_h1.lengthscales)
    K2 = _se_cross(X, X, theta.theta_h2.sigma_f, theta.theta_h2.lengthscales)
    K3 = _se_cross(X, X, theta.theta_h3.sigma_f, theta.theta_h3.lengthscales)
    K12 = K1 * K2
    K = K12 + K3 + theta.sigma_n**2 * np.eye(n)
    L, _ = chol_with_jitter(K)
    value, alpha = _nlml_from_chol(L, y)
    P = cho_solve((L, True), np.eye(n), check_finite=False)
    W = P - np.outer(alpha, alpha)
    grad = np.empty(2 * d + 5)
    grad[0] = theta.sigma_n**2 * float(np.trace(W))
    W12 = W * K12
    grad[1] = float(np.sum(W12))
    l1 = theta.theta_h1.lengthscales[0]
    D1 = ((s - s.T) / l1) ** 2
    grad[2] = 0.5 * float(np.sum(W12 * D1))
    grad[3] = float(np.sum(W12))
    ls2 = theta.theta_h2.lengthscales
    for i in range(d):
        D = ((X[:, i, None] - X[None, :, i]) / ls2[i]) ** 2
        grad[4 + i] = 0.5 * float(np.sum(W12 * D))
    W3 = W * K3
    grad[4 + d] = float(np.sum(W3))
    ls3 = theta.theta_h3.lengthscales
    for i in range(d):
        D = ((X[:, i, None] - X[None, :, i]) / ls3[i]) ** 2
        grad[5 + d + i] = 0.5 * float(np.sum(W3 * D))
    return value, grad


def nlml_mf(U: np.ndarray, y: np.ndarray, theta: MfHyperparameters) -> float:
    """NLML of standardized high-fidelity targets under the composite kernel."""
    K = covariance_matrix_mf(U, theta, with_noise=True)
    L, _ = chol_with_jitter(K)
    value, _ = _nlml_from_chol(L, y)
    return value


def _mf_log_bounds(cfg: FitConfig, dim: int):
    noise = tuple(np.log(cfg.sigma_n_bounds))
    sf = tuple(np.log(cfg.sigma_f_bounds))
    ls = tuple(np.log(cfg.lengthscale_bounds))
    return [noise, sf, ls, sf] + [ls] * dim + [sf] + [ls] * dim


def _mf_initial_vectors(cfg: FitConfig, dim: int, rng: np.random.Generator):
    inits = [MfHyperparameters.default(dim).to_vector()]
    lo = [math.log(cfg.sigma_n_init[0]), math.log(cfg.sigma_f_init[0]), math.log(cfg.lengthscale_init[0]),
          math.log(cfg.sigma_f_init[0])] + [math.log(cfg.lengthscale_init[0])] * dim + \
         [math.log(cfg.sigma_f_init[0])] + [math.log(cfg.lengthscale_init[0])] * dim
    hi = [math.log(cfg.sigma_n_init[1]), math.log(cfg.sigma_f_init[1]), math.log(cfg.lengthscale_init[1]),
          math.log(cfg.sigma_f_init[1])] + [math.log(cfg.lengthscale_init[1])] * dim + \
         [math.log(cfg.sigma_f_init[1])] + [math.log(cfg.lengthscale_init[1])] * dim
    lo, hi = np.array(lo), np.array(hi)
    for _ in range(1, cfg.n_restarts):
        inits.append(rng.uniform(lo, hi))
    return inits


def fit_mf(low: GpModel, high_data: TrainingSet, cfg: FitConfig = FitConfig()) -> MfModel:
    """Fit the fusion model given a fitted low GP and high-fidelity data.

    The high-fidelity inputs are augmented with the low model's
    standardized posterior mean evaluated at those inputs, then the
    composite-kernel GP is fitted by the same multi-restart L-BFGS-B
    scheme as the single-fidelity core.  Deterministic for fixed
    inputs and config.
    """
    if high_data.dim != low.training.dim:
        raise ContractViolation(
            f"high data dim {high_data.dim} != low model dim {low.training.dim}")
    X = high_data.inputs
    _, _, s, _ = predict_batch(low, X)
    U = np.hstack([X, s[:, None]])
    y = high_data.targets
    dim = high_data.dim

    def objective(vec):
        theta = MfHyperparameters.from_vector(vec, dim)
        try:
            value, grad = _mf_nlml_value_and_grad(U, y, theta)
        except Exception:
            return 1e25, np.zeros(2 * dim + 5)
        if not np.isfinite(value):
            return 1e25, np.zeros(2 * dim + 5)
        return value, grad

    rng = np.random.default_rng(cfg.seed)
    inits = _mf_initial_vectors(cfg, dim, rng)
    best_x, records = _minimize_restarts(objective, inits, _mf_log_bounds(cfg, dim), cfg)
    theta = MfHyperparameters.from_vector(best_x, dim)
    return make_mf_model(low, high_data, theta, restarts=records)


def make_mf_model(low: GpModel, high_data: TrainingSet, theta: MfHyperparameters,
                  restarts=()) -> MfModel:
    """Assemble the fusion model for fixed hyperparameters (no fitting)."""
    if high_data.dim != low.training.dim:
        raise ContractViolation(
            f"high data dim {high_data.dim} != low model dim {low.training.dim}")
    X = high_data.inputs
    _, _, s, _ = predict_batch(low, X)
    U = np.hstack([X, s[:, None]])
    K = covariance_matrix_mf(U, theta, with_noise=True)
    L, jitter = chol_with_jitter(K)
    value, alpha = _nlml_from_chol(L, high_data.targets)
    return MfModel(low, X.copy(), U, high_data.targets_raw.copy(),
                   high_data.target_mean, high_data.target_std,
                   theta, L, alpha, jitter, value, tuple(restarts))


def predict_mf_batch(model: MfModel, X: np.ndarray, mc: McConfig):
    """Monte Carlo fused posterior at query rows ``X``.

    For each query point, ``mc.n_samples`` draws from the low model's
    standardized posterior are pushed through the high GP; the mean is
    the sample average and the variance combines the average predictive
    variance with the spread of the sample means (law of total
    variance).  The draw stream depends only on ``mc.seed`` and is shared
    across query points, so results are deterministic.

    Returns (mean, variance, mean_std, variance_std) arrays.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.dim:
        raise ContractViolation(f"query dim {X.shape[1]} != model dim {model.dim}")
    if mc.n_samples < 1:
        raise ContractViolation("mc.n_samples must be >= 1")
    q = X.shape[0]
    _, _, mu_s, var_s = predict_batch(model.low, X)
    sd_s = np.sqrt(var_s)
    rng = np.random.default_rng(mc.seed)
    n = mc.n_samples
    sum_m = np.zeros(q)
    sum_m2 = np.zeros(q)
    sum_v = np.zeros(q)
    chunk = max(1, _CHUNK_ROWS // q)
    done = 0
    while done < n:
        take = min(chunk, n - done)
        z = rng.standard_normal(take)
        S = mu_s[:, None] + sd_s[:, None] * z[None, :]
        U = np.empty((q * take, model.dim + 1))
        U[:, :model.dim] = np.repeat(X, take, axis=0)
        U[:, model.dim] = S.ravel()
        m, v = model.high_posterior(U)
        m = m.reshape(q, take)
        v = v.reshape(q, take)
        sum_m += m.sum(axis=1)
        sum_m2 += (m * m).sum(axis=1)
        sum_v += v.sum(axis=1)
        done += take
    mean_std = sum_m / n
    spread = np.maximum(sum_m2 / n - mean_std**2, 0.0)
    var_std = sum_v / n + spread
    mean = mean_std * model.target_std + model.target_mean
    variance = var_std * model.target_std**2
    return mean, variance, mean_std, var_std


def predict_mf(model: MfModel, x, mc: McConfig = McConfig()) -> PosteriorGaussian:
    """Fused posterior at a single point; see :func:`predict_mf_batch`."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.ndim != 1:
        raise ContractViolation(f"expected a single point, got shape {x.shape}")
    mean, variance, _, var_std = predict_mf_batch(model, x[None, :], mc)
    return PosteriorGaussian(float(mean[0]), float(variance[0]), float(var_std[0]))
