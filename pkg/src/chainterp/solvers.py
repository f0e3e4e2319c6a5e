"""Sparse regression kernels: weighted lasso by ADMM, weighted least squares, OMP.

The lasso solver minimises

    0.5 * sum_n h_n (w . x_n - y_n)^2 + lam * ||w||_1

by splitting ``w = m`` and iterating the closed-form w-update, a soft-threshold
m-update and the scaled multiplier update ``u <- u - (w - m)``. The system
matrix ``X^T H X + rho I`` does not change across iterations, so it is
Cholesky-factored once per problem.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

log = logging.getLogger(__name__)


class ConvergenceWarning(UserWarning):
    pass


class RankDeficiencyWarning(UserWarning):
    pass


def soft_threshold(x, tau: float) -> np.ndarray:
    """Coordinate-wise ``sign(x) * max(|x| - tau, 0)``."""
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.maximum(np.abs(x) - tau, 0.0)


@dataclass(frozen=True)
class WeightedLassoProblem:
    features: np.ndarray
    targets: np.ndarray
    sample_weights: np.ndarray
    lam: float

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.targets, dtype=np.float64)
        h = np.ones(len(y)) if self.sample_weights is None else np.asarray(self.sample_weights, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] < 1:
            raise ValueError("features must be a non-empty N x I matrix")
        if y.shape != (X.shape[0],) or h.shape != (X.shape[0],):
            raise ValueError("targets and sample_weights must have one entry per feature row")
        if np.any(h < 0):
            raise ValueError("sample_weights must be nonnegative")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y)) and np.all(np.isfinite(h))):
            raise ValueError("problem data must be finite")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "sample_weights", h)

    def objective(self, w) -> float:
        r = self.features @ w - self.targets
        return 0.5 * float(np.sum(self.sample_weights * r * r)) + self.lam * float(np.sum(np.abs(w)))


@dataclass(frozen=True)
class AdmmConfig:
    rho: float = 1.0
    max_iters: int = 5000
    tol_primal: float = 1e-7
    tol_dual: float = 1e-7
    init_m: np.ndarray | None = None
    init_u: np.ndarray | None = None

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if not (self.tol_primal > 0 and self.tol_dual > 0):
            raise ValueError("tolerances must be positive")


@dataclass
class SolveResult:
    weights: np.ndarray
    iterations: int
    primal_residual: float
    dual_residual: float
    converged: bool
    objective: float = field(default=float("nan"))

    def stats(self) -> dict:
        return {
            "iterations": self.iterations,
            "primal_residual": self.primal_residual,
            "dual_residual": self.dual_residual,
            "converged": self.converged,
            "objective": self.objective,
        }


def admm_weighted_lasso(problem: WeightedLassoProblem, config: AdmmConfig | None = None) -> SolveResult:
    """Solve a weighted lasso problem by ADMM.

    The returned weights are the split variable ``m``: it agrees with the
    least-squares iterate ``w`` to within the primal tolerance and carries the
    exact zeros produced by the soft-threshold step.
    """
    cfg = config or AdmmConfig()
    X, y, h = problem.features, problem.targets, problem.sample_weights
    n_feat = X.shape[1]
    rho, tau = cfg.rho, problem.lam / cfg.rho

    Xh = X * h[:, None]
    gram = X.T @ Xh + rho * np.eye(n_feat)
    xty = Xh.T @ y
    factor = cho_factor(gram)

    m = np.zeros(n_feat) if cfg.init_m is None else np.asarray(cfg.init_m, dtype=np.float64).copy()
    u = np.zeros(n_feat) if cfg.init_u is None else np.asarray(cfg.init_u, dtype=np.float64).copy()
    if m.shape != (n_feat,) or u.shape != (n_feat,):
        raise ValueError("init_m and init_u must match the feature count")

    r_primal = r_dual = np.inf
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        w = cho_solve(factor, xty + rho * (m + u))
        m_new = soft_threshold(w - u, tau)
        u = u - (w - m_new)
        r_primal = float(np.linalg.norm(w - m_new))
        r_dual = float(np.linalg.norm(rho * (m_new - m)))
        m = m_new
        if r_primal <= cfg.tol_primal * max(1.0, float(np.linalg.norm(w))) and r_dual <= cfg.tol_dual:
            converged = True
            break

    if not converged:
        msg = (
            f"ADMM stopped after {it} iterations without meeting tolerances "
            f"(primal {r_primal:.3g}, dual {r_dual:.3g})"
        )
        log.warning(msg)
        warnings.warn(msg, ConvergenceWarning, stacklevel=2)
    return SolveResult(
        weights=m,
        iterations=it,
        primal_residual=r_primal,
        dual_residual=r_dual,
        converged=converged,
        objective=problem.objective(m),
    )


def weighted_least_squares(features, targets, sample_weights=None) -> np.ndarray:
    """Minimise ``sum_n h_n (w . x_n - y_n)^2``.

    Rank-deficient systems get the least-norm minimiser and a
    :class:`RankDeficiencyWarning`.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError("features must be N x I and targets length N")
    h = np.ones(len(y)) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    if np.any(h < 0):
        raise ValueError("sample_weights must be nonnegative")
    s = np.sqrt(h)
    w, _, rank, _ = np.linalg.lstsq(X * s[:, None], y * s, rcond=None)
    if rank < X.shape[1]:
        warnings.warn(
            f"weighted least squares is rank deficient ({rank} < {X.shape[1]}); returning least-norm solution",
            RankDeficiencyWarning,
            stacklevel=2,
        )
    return w


def omp_sparse_decompose(dictionary, target, sparsity: int) -> np.ndarray:
    """Greedy L0-constrained fit ``min ||D a - target||^2  s.t. ||a||_0 <= sparsity``.

    Atoms are picked by normalised absolute correlation with the residual
    (lowest index wins ties) and the coefficients are re-fit by least squares
    on the selected support after every pick.
    """
    D = np.asarray(dictionary, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if D.ndim != 2 or t.shape != (D.shape[0],):
        raise ValueError("dictionary must be I x K and target length I")
    n_atoms = D.shape[1]
    if not 1 <= sparsity <= n_atoms:
        raise ValueError(f"sparsity must lie in [1, {n_atoms}], got {sparsity}")

    alpha = np.zeros(n_atoms)
    if np.linalg.norm(t) == 0.0:
        return alpha

    norms = np.linalg.norm(D, axis=0)
    usable = norms > 0
    if not usable.any():
        raise ValueError("dictionary has only all-zero atoms")
    if not usable.all():
        warnings.warn(f"skipping {int((~usable).sum())} all-zero atoms", RuntimeWarning, stacklevel=2)
    safe_norms = np.where(usable, norms, 1.0)

    support: list[int] = []
    residual = t.copy()
    coef = np.zeros(0)
    for _ in range(sparsity):
        if np.linalg.norm(residual) < 1e-12:
            break
        score = np.abs(D.T @ residual) / safe_norms
        score[~usable] = -np.inf
        score[support] = -np.inf
        k = int(np.argmax(score))
        if not np.isfinite(score[k]):
            break
        support.append(k)
        coef, *_ = np.linalg.lstsq(D[:, support], t, rcond=None)
        residual = t - D[:, support] @ coef
    alpha[support] = coef
    return alpha


class WeightedLassoADMM(RegressorMixin, BaseEstimator):
    """Estimator wrapper around :func:`admm_weighted_lasso` (no intercept)."""

    def __init__(self, lam=1.0, rho=1.0, max_iter=5000, tol=1e-7):
        self.lam = lam
        self.rho = rho
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y, sample_weight=None):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        h = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
        self.lam_ = self._penalty(X, h)
        problem = WeightedLassoProblem(X, y, h, self.lam_)
        cfg = AdmmConfig(rho=self.rho, max_iters=self.max_iter, tol_primal=self.tol, tol_dual=self.tol)
        self.result_ = admm_weighted_lasso(problem, cfg)
        self.coef_ = self.result_.weights
        self.n_iter_ = self.result_.iterations
        self.n_features_in_ = X.shape[1]
        return self

    def _penalty(self, X, h) -> float:
        return float(self.lam)

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        return X @ self.coef_


class OMPCoder(TransformerMixin, BaseEstimator):
    """Sparse-code rows of ``X`` against a fixed dictionary with OMP.

    ``fit`` takes the dictionary as an (n_features, n_atoms) matrix whose
    columns are the atoms.
    """

    def __init__(self, n_nonzero=5):
        self.n_nonzero = n_nonzero

    def fit(self, dictionary, y=None):
        self.components_ = check_array(dictionary, dtype=np.float64)
        self.n_features_in_ = self.components_.shape[0]
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(X, dtype=np.float64)
        k = min(self.n_nonzero, self.components_.shape[1])
        return np.vstack([omp_sparse_decompose(self.components_, row, k) for row in X])


def lasso_certificate(features, targets, sample_weights, lam: float, weights) -> float:
    """Largest subgradient-condition violation of a weighted lasso solution, relative to data scale.

    The scale is ``max(||X^T H y||_inf, lam)``. A value below ``1e-5`` certifies
    the weights to that relative accuracy.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    h = np.ones(len(y)) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    grad = X.T @ (h * (X @ w - y))
    scale = max(float(np.max(np.abs(X.T @ (h * y)), initial=0.0)), lam)
    if scale == 0.0:
        return float(np.max(np.abs(grad), initial=0.0))
    nz = w != 0
    viol = np.where(nz, np.abs(grad + lam * np.sign(w)), np.maximum(np.abs(grad) - lam, 0.0))
    return float(np.max(viol, initial=0.0) / scale)
