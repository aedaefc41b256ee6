"""Per-site sparse fitting and extraction of the shareable summary triple.

The local problem is

    min_beta  n^-1 sum_i f(beta'X_i, Y_i) + lambda * ||beta_{-1}||_1

solved by cyclic coordinate descent on the quadratic majorization, with an
IRLS outer loop for the logistic family.  The intercept (first coordinate)
is never penalized.  The summary triple is (n, H, g) with H the Hessian of
the average loss at the fitted coefficients and g = H beta - grad.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import families
from ._kernels import wls_lasso_sweeps
from .data import LocalSummary, StudyData
from .errors import ContractViolation, ConvergenceError, DataError, DegenerateFoldError
from .families import LossFamily, as_family

MAX_OUTER = 50
MAX_SWEEPS = 10_000
COEF_TOL = 1e-9
KKT_TOL = 1e-7
WEIGHT_FLOOR = 1e-5

# fold fits only rank candidate penalties, so they run at reduced effort;
# the full-data refit uses the tight defaults above
FOLD_TOL = 1e-7
FOLD_MAX_SWEEPS = 2_000
FOLD_MAX_OUTER = 25


def kkt_residual_lasso(data, beta, family, lam) -> float:
    """Max KKT violation of the l1 problem at beta, on the exact gradient."""
    grad = families.gradient(data, beta, family)
    res = abs(grad[0])
    for j in range(1, beta.shape[0]):
        if beta[j] != 0.0:
            res = max(res, abs(grad[j] + lam * np.sign(beta[j])))
        else:
            res = max(res, max(0.0, abs(grad[j]) - lam))
    return float(res)


def _irls_pieces(X, y, beta, family):
    a = X @ beta
    w = families.loss_d2(a, y, family)
    if family is LossFamily.LOGISTIC:
        w = np.maximum(w, WEIGHT_FLOOR)
    z = a - families.loss_d1(a, y, family) / w
    return w, z


def fit_local_lasso(data, family, lam, beta0=None, *, max_outer=MAX_OUTER,
                    max_sweeps=MAX_SWEEPS, tol=COEF_TOL, kkt_tol=KKT_TOL,
                    check_kkt=True, return_trace=False):
    """Solve the penalized local problem; returns the length-p coefficient vector.

    beta0 warm-starts the solver.  With return_trace=True, also returns the
    per-sweep objective history of the last quadratic subproblem.
    """
    family = as_family(family)
    if lam < 0:
        raise ContractViolation("lambda must be nonnegative")
    families.validate_response(data.Y, family)
    X, y = np.asfortranarray(data.X), data.Y
    n, p = X.shape
    beta = np.zeros(p) if beta0 is None else np.array(beta0, dtype=np.float64)
    if beta.shape != (p,):
        raise ContractViolation(f"beta0 has shape {beta.shape}, expected ({p},)")
    pen = np.full(p, float(lam))
    pen[0] = 0.0
    empty = np.empty(0)
    traces: list[np.ndarray] = []
    inner_tol = tol
    for outer in range(max_outer):
        prev = beta.copy()
        w, z = _irls_pieces(X, y, beta, family)
        a = (w @ (X * X)) / n
        r = z - X @ beta
        history = np.empty(max_sweeps) if return_trace else empty
        nsw = wls_lasso_sweeps(X, z, w, pen, beta, r, a, max_sweeps, inner_tol, history)
        if return_trace:
            traces.append(history[:nsw].copy())
        change = np.abs(beta - prev).max()
        if change < tol and (outer > 0 or family is LossFamily.SQUARED):
            if not check_kkt:
                break
            res = kkt_residual_lasso(data, beta, family, lam)
            if res <= kkt_tol:
                break
            # stale partial residuals can leave the exact KKT slightly above
            # tolerance; polish with tighter sweeps
            inner_tol = max(inner_tol * 1e-2, 1e-15)
    else:
        if check_kkt:
            res = kkt_residual_lasso(data, beta, family, lam)
            if res > kkt_tol:
                raise ConvergenceError(
                    f"local lasso did not converge: KKT residual {res:.3e}",
                    residual=res)
    if return_trace:
        return beta, traces
    return beta


def intercept_only(data, family):
    """Coefficients of the intercept-only fit (zeros elsewhere)."""
    family = as_family(family)
    beta = np.zeros(data.p)
    ybar = float(data.Y.mean())
    if family is LossFamily.SQUARED:
        beta[0] = ybar
    else:
        if ybar <= 0.0 or ybar >= 1.0:
            raise DataError("single-class response: intercept-only fit diverges")
        beta[0] = np.log(ybar / (1.0 - ybar))
    return beta


def lambda_max(data, family) -> float:
    """Smallest penalty that yields the null model (intercept only)."""
    beta = intercept_only(data, family)
    grad = families.gradient(data, beta, family)
    return float(np.abs(grad[1:]).max())


def default_lambda_grid(data, family, n_points=100, ratio=1e-3) -> np.ndarray:
    """Log-spaced grid from lambda_max down to ratio * lambda_max."""
    top = lambda_max(data, family)
    return np.geomspace(top, ratio * top, n_points)


@dataclass
class LocalFit:
    """A fitted local model plus the cross-validation trace that chose it."""

    beta: np.ndarray
    lambda_m: float
    cv_curve: list[tuple[float, float]] = field(default_factory=list)

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64).ravel()
        lams = [l for l, _ in self.cv_curve]
        if any(b >= a for a, b in zip(lams, lams[1:])):
            raise ContractViolation("cv_curve must be sorted by descending lambda")


def _fold_ids(n, K, rng):
    perm = rng.permutation(n)
    ids = np.empty(n, dtype=np.int64)
    ids[perm] = np.arange(n) % K
    return ids


def _check_folds(y, ids, K, family):
    if family is not LossFamily.LOGISTIC:
        return True
    for k in range(K):
        ytr = y[ids != k]
        if ytr.min() == ytr.max():
            return False
    return True


def cross_validate_lambda(data, family, K=10, grid=None, seed=0) -> LocalFit:
    """Pick the per-site penalty by K-fold CV on out-of-fold average loss."""
    family = as_family(family)
    if K < 2 or K > data.n:
        raise ContractViolation(f"K must be in [2, n]; got {K}")
    if grid is None:
        grid = default_lambda_grid(data, family)
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0 or np.any(np.diff(grid) >= 0):
        raise ContractViolation("lambda grid must be nonempty and strictly decreasing")
    rng = np.random.default_rng(seed)
    ids = _fold_ids(data.n, K, rng)
    if not _check_folds(data.Y, ids, K, family):
        ids = _fold_ids(data.n, K, rng)  # resample once
        if not _check_folds(data.Y, ids, K, family):
            raise DegenerateFoldError("a training fold has a single response class")
    losses = np.empty((K, grid.size))
    for k in range(K):
        tr = ids != k
        dtr = StudyData(data.X[tr], data.Y[tr], site_id=f"{data.site_id}#fold{k}")
        dva = StudyData(data.X[~tr], data.Y[~tr], site_id=f"{data.site_id}#val{k}")
        beta = np.zeros(data.p)
        for gi, lam in enumerate(grid):
            beta = fit_local_lasso(dtr, family, lam, beta0=beta, check_kkt=False,
                                   tol=FOLD_TOL, max_sweeps=FOLD_MAX_SWEEPS,
                                   max_outer=FOLD_MAX_OUTER)
            losses[k, gi] = families.empirical_loss(dva, beta, family)
    mean_loss = losses.mean(axis=0)
    best = int(np.argmin(mean_loss))  # ties resolve to the larger lambda
    beta = np.zeros(data.p)
    for lam in grid[:best]:
        beta = fit_local_lasso(data, family, lam, beta0=beta, check_kkt=False)
    beta = fit_local_lasso(data, family, grid[best], beta0=beta)
    return LocalFit(beta=beta, lambda_m=float(grid[best]),
                    cv_curve=list(zip(grid.tolist(), mean_loss.tolist())))


def summarize(data, fit, family) -> LocalSummary:
    """Build the shareable summary (n, H, g) at the fitted coefficients."""
    family = as_family(family)
    beta = fit.beta if isinstance(fit, LocalFit) else np.asarray(fit, dtype=float)
    if beta.shape != (data.p,):
        raise ContractViolation("fit does not match the data dimension")
    H = families.hessian(data, beta, family)
    g = H @ beta - families.gradient(data, beta, family)
    lam = fit.lambda_m if isinstance(fit, LocalFit) else 0.0
    return LocalSummary(site_id=data.site_id, n=data.n, H=H, g=g,
                        family=family, lambda_m=lam)
