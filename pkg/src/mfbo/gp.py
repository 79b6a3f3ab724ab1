"""Gaussian process regression core.

Zero-mean GP with an anisotropic squared-exponential kernel, exact
inference through Cholesky factorization and multi-restart L-BFGS-B
hyperparameter fitting in log space.  Inputs are expected to live in
the unit box (the optimizer normalizes designs before fitting) and
targets are standardized per model, so the default hyperparameter
boxes are dimensionless.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize

LOG_TWO_PI = math.log(2.0 * math.pi)

# Diagonal jitter schedule used when a covariance matrix fails to factor:
# start at 1e-10 * mean(diag), grow tenfold, give up at 1e-4 * mean(diag).
JITTER_INITIAL_FACTOR = 1e-10
JITTER_GROWTH = 10.0
JITTER_MAX_FACTOR = 1e-4

# Objective value returned to L-BFGS-B when the covariance cannot be
# factored at a trial point; large enough that such restarts never win.
_PENALTY = 1e25

# Guard for degenerate target spread when standardizing.
DEGENERATE_STD = 1e-12


class ContractViolation(ValueError):
    """An argument violated a documented precondition."""


class FitFailed(RuntimeError):
    """Every restart of a hyperparameter fit failed."""


class NotPositiveDefinite(RuntimeError):
    """Covariance factorization failed even at the maximum jitter.

    Attributes
    ----------
    jitter : float
        The final (largest) jitter value that was attempted.
    """

    def __init__(self, message: str, jitter: float):
        super().__init__(message)
        self.jitter = jitter


@dataclass(frozen=True)
class Hyperparameters:
    """Kernel and noise hyperparameters, stored in log space.

    Parameters
    ----------
    log_sigma_n : float
        Log observation-noise standard deviation.
    log_sigma_f : float
        Log signal standard deviation.
    log_lengthscales : ndarray, shape (d,)
        Log per-dimension lengthscales.
    """

    log_sigma_n: float
    log_sigma_f: float
    log_lengthscales: np.ndarray

    @property
    def sigma_n(self) -> float:
        return math.exp(self.log_sigma_n)

    @property
    def sigma_f(self) -> float:
        return math.exp(self.log_sigma_f)

    @property
    def lengthscales(self) -> np.ndarray:
        return np.exp(self.log_lengthscales)

    @property
    def dim(self) -> int:
        return self.log_lengthscales.shape[0]

    def to_vector(self) -> np.ndarray:
        """Pack as [log_sigma_n, log_sigma_f, log_lengthscales...]."""
        return np.concatenate(([self.log_sigma_n, self.log_sigma_f], self.log_lengthscales))

    @classmethod
    def from_vector(cls, vec: np.ndarray, dim: int) -> "Hyperparameters":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (dim + 2,):
            raise ContractViolation(f"expected vector of length {dim + 2}, got shape {vec.shape}")
        return cls(float(vec[0]), float(vec[1]), vec[2:].copy())

    @classmethod
    def create(cls, sigma_n: float, sigma_f: float, lengthscales) -> "Hyperparameters":
        """Build from raw (non-log) values."""
        ls = np.atleast_1d(np.asarray(lengthscales, dtype=float))
        if np.any(ls <= 0) or sigma_n < 0 or sigma_f <= 0:
            raise ContractViolation("sigma_f and lengthscales must be positive, sigma_n nonnegative")
        with np.errstate(divide="ignore"):
            log_n = math.log(sigma_n) if sigma_n > 0 else -math.inf
        return cls(log_n, math.log(sigma_f), np.log(ls))

    @classmethod
    def default(cls, dim: int) -> "Hyperparameters":
        """Untuned starting point for unit-box inputs and standardized targets."""
        return cls.create(1e-2, 1.0, np.full(dim, 0.5))


@dataclass(frozen=True)
class TrainingSet:
    """Immutable training data with the target standardizer baked in.

    ``targets_raw`` keeps the observations in original units; ``targets``
    exposes the standardized values the GP actually conditions on.
    """

    inputs: np.ndarray
    targets_raw: np.ndarray
    target_mean: float
    target_std: float

    @classmethod
    def from_data(cls, inputs, targets, standardize: bool = True) -> "TrainingSet":
        """Create a training set, optionally standardizing targets.

        Parameters
        ----------
        inputs : array-like, shape (n, d)
        targets : array-like, shape (n,)
        standardize : bool
            When True, targets are shifted/scaled to zero mean and unit
            variance.  A target spread below 1e-12 falls back to scale 1
            so constant data stays well posed.
        """
        X = np.atleast_2d(np.asarray(inputs, dtype=float))
        y = np.asarray(targets, dtype=float).ravel()
        if X.shape[0] != y.shape[0]:
            raise ContractViolation(f"inputs rows ({X.shape[0]}) != targets length ({y.shape[0]})")
        if X.shape[0] < 1:
            raise ContractViolation("training set needs at least one observation")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ContractViolation("training data must be finite")
        if standardize:
            mean = float(y.mean())
            std = float(y.std())
            if std < DEGENERATE_STD:
                std = 1.0
        else:
            mean, std = 0.0, 1.0
        return cls(X, y, mean, std)

    @property
    def targets(self) -> np.ndarray:
        """Standardized targets."""
        return (self.targets_raw - self.target_mean) / self.target_std

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]


@dataclass(frozen=True)
class PosteriorGaussian:
    """Predictive marginal at a single point.

    ``mean`` and ``variance`` are in original target units; ``variance_std``
    is the same predictive variance on the standardized scale, which is
    what the fidelity-selection rule thresholds against.
    """

    mean: float
    variance: float
    variance_std: float

    @property
    def sigma(self) -> float:
        return math.sqrt(max(self.variance, 0.0))


def _se_cross(a: np.ndarray, b: np.ndarray, sigma_f: float, lengthscales: np.ndarray) -> np.ndarray:
    """Squared-exponential kernel matrix between rows of ``a`` and ``b``."""
    sa = a / lengthscales
    sb = b / lengthscales
    # Direct (x - y)^2 sums; numerically exact for the symmetric case,
    # unlike the dot-product expansion.
    diff = sa[:, None, :] - sb[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    return sigma_f**2 * np.exp(-0.5 * sq)


def kernel_se(x1, x2, theta: Hyperparameters) -> float:
    """Anisotropic squared-exponential kernel between two points.

    Returns sigma_f^2 * exp(-0.5 * sum(((x1_i - x2_i) / l_i)^2)).  The
    noise term is never part of the kernel value; it only enters the
    training covariance diagonal.
    """
    a = np.atleast_1d(np.asarray(x1, dtype=float))
    b = np.atleast_1d(np.asarray(x2, dtype=float))
    if a.shape != b.shape or a.ndim != 1:
        raise ContractViolation(f"point shapes differ: {a.shape} vs {b.shape}")
    if a.shape[0] != theta.dim:
        raise ContractViolation(f"points have dim {a.shape[0]}, theta has dim {theta.dim}")
    z = (a - b) / theta.lengthscales
    return float(theta.sigma_f**2 * math.exp(-0.5 * float(z @ z)))


def covariance_matrix(ts: Union[TrainingSet, np.ndarray], theta: Hyperparameters,
                      with_noise: bool = True) -> np.ndarray:
    """Training covariance K(X, X), optionally plus sigma_n^2 I."""
    X = ts.inputs if isinstance(ts, TrainingSet) else np.atleast_2d(np.asarray(ts, dtype=float))
    if X.shape[1] != theta.dim:
        raise ContractViolation(f"inputs have dim {X.shape[1]}, theta has dim {theta.dim}")
    K = _se_cross(X, X, theta.sigma_f, theta.lengthscales)
    if with_noise:
        K = K + theta.sigma_n**2 * np.eye(X.shape[0])
    return K


def chol_with_jitter(K: np.ndarray) -> Tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``K``, adding diagonal jitter on failure.

    Jitter starts at 1e-10 * mean(diag(K)) and grows tenfold per retry up
    to 1e-4 * mean(diag(K)).  Raises :class:`NotPositiveDefinite` carrying
    the final jitter once the schedule is exhausted.
    """
    mean_diag = float(np.mean(np.diag(K))) if K.size else 1.0
    if mean_diag <= 0 or not np.isfinite(mean_diag):
        mean_diag = 1.0
    jitter = 0.0
    n = K.shape[0]
    while True:
        try:
            shifted = K if jitter == 0.0 else K + jitter * np.eye(n)
            return cholesky(shifted, lower=True, check_finite=False), jitter
        except (LinAlgError, ValueError):
            if jitter == 0.0:
                jitter = JITTER_INITIAL_FACTOR * mean_diag
            elif jitter >= JITTER_MAX_FACTOR * mean_diag * (1.0 - 1e-12):
                raise NotPositiveDefinite(
                    f"covariance not positive definite at maximum jitter {jitter:.3e}",
                    jitter=jitter,
                )
            else:
                jitter = jitter * JITTER_GROWTH


def _nlml_from_chol(L: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray]:
    alpha = cho_solve((L, True), y, check_finite=False)
    n = y.shape[0]
    log_det = 2.0 * float(np.sum(np.log(np.diag(L))))
    value = 0.5 * (float(y @ alpha) + log_det + n * LOG_TWO_PI)
    return value, alpha


def nlml(ts: TrainingSet, theta: Hyperparameters) -> float:
    """Negative log marginal likelihood of the standardized targets.

    0.5 * (y^T K^-1 y + log |K| + n log 2 pi) with K = K(X, X) + sigma_n^2 I,
    evaluated through a (jittered) Cholesky factorization.
    """
    K = covariance_matrix(ts, theta, with_noise=True)
    L, _ = chol_with_jitter(K)
    value, _ = _nlml_from_chol(L, ts.targets)
    return value


def _nlml_value_and_grad(ts: TrainingSet, theta: Hyperparameters) -> Tuple[float, np.ndarray]:
    X = ts.inputs
    y = ts.targets
    n, d = X.shape
    Knf = _se_cross(X, X, theta.sigma_f, theta.lengthscales)
    K = Knf + theta.sigma_n**2 * np.eye(n)
    L, _ = chol_with_jitter(K)
    value, alpha = _nlml_from_chol(L, y)
    # dNLML/dtheta_j = 0.5 tr((K^-1 - alpha alpha^T) dK/dtheta_j)
    P = cho_solve((L, True), np.eye(n), check_finite=False)
    W = P - np.outer(alpha, alpha)
    grad = np.empty(d + 2)
    grad[0] = theta.sigma_n**2 * float(np.trace(W))
    grad[1] = float(np.sum(W * Knf))
    WK = W * Knf
    ls = theta.lengthscales
    for i in range(d):
        D = ((X[:, i, None] - X[None, :, i]) / ls[i]) ** 2
        grad[2 + i] = 0.5 * float(np.sum(WK * D))
    return value, grad


def nlml_gradient(ts: TrainingSet, theta: Hyperparameters) -> np.ndarray:
    """Gradient of :func:`nlml` with respect to the log hyperparameters.

    Component order matches ``Hyperparameters.to_vector``:
    [log_sigma_n, log_sigma_f, log_lengthscales...].
    """
    return _nlml_value_and_grad(ts, theta)[1]


@dataclass(frozen=True)
class FitConfig:
    """Settings for multi-restart hyperparameter fitting.

    Bounds and initialization ranges are raw (non-log) values; the
    optimizer works on log parameters internally.
    """

    n_restarts: int = 5
    max_iter: int = 100
    seed: int = 0
    sigma_n_bounds: Tuple[float, float] = (1e-6, 1.0)
    sigma_f_bounds: Tuple[float, float] = (1e-3, 1e3)
    lengthscale_bounds: Tuple[float, float] = (1e-3, 1e2)
    sigma_n_init: Tuple[float, float] = (1e-4, 1e-1)
    sigma_f_init: Tuple[float, float] = (0.3, 3.0)
    lengthscale_init: Tuple[float, float] = (0.05, 2.0)


@dataclass(frozen=True)
class RestartRecord:
    """Outcome of one L-BFGS-B restart."""

    index: int
    initial_nlml: float
    final_nlml: float


@dataclass(frozen=True)
class GpModel:
    """A fitted GP: training set, hyperparameters and solve cache."""

    training: TrainingSet
    theta: Hyperparameters
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float
    nlml_value: float
    restarts: Tuple[RestartRecord, ...] = ()


def make_model(ts: TrainingSet, theta: Hyperparameters,
               restarts: Tuple[RestartRecord, ...] = ()) -> GpModel:
    """Build a :class:`GpModel` at fixed hyperparameters (no fitting)."""
    K = covariance_matrix(ts, theta, with_noise=True)
    L, jitter = chol_with_jitter(K)
    value, alpha = _nlml_from_chol(L, ts.targets)
    return GpModel(ts, theta, L, alpha, jitter, value, restarts)


def _log_bounds(cfg: FitConfig, dim: int):
    bounds = [tuple(np.log(cfg.sigma_n_bounds)), tuple(np.log(cfg.sigma_f_bounds))]
    bounds += [tuple(np.log(cfg.lengthscale_bounds))] * dim
    return bounds


def _initial_vectors(cfg: FitConfig, dim: int, rng: np.random.Generator) -> list:
    inits = [Hyperparameters.default(dim).to_vector()]
    lo = np.array([np.log(cfg.sigma_n_init[0]), np.log(cfg.sigma_f_init[0])]
                  + [np.log(cfg.lengthscale_init[0])] * dim)
    hi = np.array([np.log(cfg.sigma_n_init[1]), np.log(cfg.sigma_f_init[1])]
                  + [np.log(cfg.lengthscale_init[1])] * dim)
    for _ in range(1, cfg.n_restarts):
        inits.append(rng.uniform(lo, hi))
    return inits


def _minimize_restarts(objective, inits, bounds, cfg: FitConfig):
    """Shared multi-restart L-BFGS-B driver.  Returns (best_x, records)."""
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    best_x = None
    best_val = math.inf
    records = []
    for idx, x0 in enumerate(inits):
        x0 = np.clip(np.asarray(x0, dtype=float), lo, hi)
        init_val = float(objective(x0)[0])
        try:
            res = minimize(objective, x0, jac=True, method="L-BFGS-B",
                           bounds=bounds, options={"maxiter": cfg.max_iter})
            final_val, final_x = float(res.fun), np.asarray(res.x, dtype=float)
        except (LinAlgError, ValueError):
            final_val, final_x = math.inf, x0
        records.append(RestartRecord(idx, init_val, final_val))
        # Strict comparison: exact ties resolve to the lowest restart index.
        if final_val < best_val:
            best_val = final_val
            best_x = final_x
    if best_x is None or not math.isfinite(best_val) or best_val >= _PENALTY * 0.5:
        raise FitFailed(f"all {len(inits)} restarts failed")
    return best_x, tuple(records)


def fit(ts: TrainingSet, cfg: FitConfig = FitConfig()) -> GpModel:
    """Fit hyperparameters by multi-restart L-BFGS-B on the NLML.

    Restart 0 starts from :meth:`Hyperparameters.default`; the remaining
    restarts draw log-uniform starting points from the init ranges using
    ``cfg.seed``, so the result is deterministic for fixed data and
    config.  Raises :class:`FitFailed` when every restart fails.
    """
    dim = ts.dim

    def objective(vec):
        theta = Hyperparameters.from_vector(vec, dim)
        try:
            value, grad = _nlml_value_and_grad(ts, theta)
        except NotPositiveDefinite:
            return _PENALTY, np.zeros(dim + 2)
        if not np.isfinite(value):
            return _PENALTY, np.zeros(dim + 2)
        return value, grad

    rng = np.random.default_rng(cfg.seed)
    inits = _initial_vectors(cfg, dim, rng)
    best_x, records = _minimize_restarts(objective, inits, _log_bounds(cfg, dim), cfg)
    return make_model(ts, Hyperparameters.from_vector(best_x, dim), records)


def predict_batch(model: GpModel, X: np.ndarray):
    """Vectorized posterior at query rows ``X``.

    Returns
    -------
    mean, variance, mean_std, variance_std : ndarray, shape (m,)
        Posterior mean/variance in original units plus their standardized
        counterparts.  Variances include the fitted noise term.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    ts = model.training
    if X.shape[1] != ts.dim:
        raise ContractViolation(f"query dim {X.shape[1]} != training dim {ts.dim}")
    if not np.all(np.isfinite(X)):
        raise ContractViolation("query points must be finite")
    theta = model.theta
    Ks = _se_cross(X, ts.inputs, theta.sigma_f, theta.lengthscales)
    mean_std = Ks @ model.alpha
    V = solve_triangular(model.chol, Ks.T, lower=True, check_finite=False)
    var_std = theta.sigma_n**2 + theta.sigma_f**2 - np.einsum("ij,ij->j", V, V)
    var_std = np.maximum(var_std, 0.0)
    mean = mean_std * ts.target_std + ts.target_mean
    variance = var_std * ts.target_std**2
    return mean, variance, mean_std, var_std


def predict(model: GpModel, x) -> PosteriorGaussian:
    """Posterior mean and variance at one point (never forms K^-1 densely)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.ndim != 1:
        raise ContractViolation(f"expected a single point, got shape {x.shape}")
    mean, variance, _, var_std = predict_batch(model, x[None, :])
    return PosteriorGaussian(float(mean[0]), float(variance[0]), float(var_std[0]))
