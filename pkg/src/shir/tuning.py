"""Penalty selection by generalized information criterion.

GIC(lam, lam_g) = Deviance + gamma_N * DF, where the deviance is the
summary-based quadratic loss at the fitted coefficients and DF is the trace
of the inverse penalized curvature times the unpenalized curvature, both
restricted to the active coordinates after eliminating the first site's
deviations through the sum-to-zero constraint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aggregator import _check_bundle, _stack, lambda_crit, solve_shir
from .data import (CoefficientBundle, GammaSchedule, PenaltyConfig,
                   gamma_value)
from .errors import ConvergenceError, SingularityError

LAMBDA_G_FACTORS = (0.25, 0.5, 1.0, 2.0, 4.0)
N_LAMBDA = 50
LAMBDA_FLOOR_RATIO = 1e-3


def deviance(summaries, bundle) -> float:
    """Quadratic-loss part of the aggregation objective at the bundle."""
    H, g, w, order = _stack(summaries)
    _check_bundle(bundle, *g.shape)
    beta = bundle.beta[order]
    val = 0.0
    for m in range(g.shape[0]):
        val += w[m] * (beta[m] @ (H[m] @ beta[m]) - 2.0 * (g[m] @ beta[m]))
    return float(val)


def _elimination_map(M):
    # alpha_j = T a_j with a_j the site-2..M deviations and site 1 eliminated
    T = np.zeros((M, M - 1))
    T[0, :] = -1.0
    T[1:, :] = np.eye(M - 1)
    return T


def trace_df(K, w, alpha, mu_idx, al_idx, pen_scale) -> float:
    """tr([2B + pen_scale * P]^-1 [2B]) on the restricted coordinates.

    K holds the per-site curvature blocks (H_m for the quadratic surrogate,
    exact loss Hessians for the pooled estimator), B is the smooth-part
    curvature in the eliminated parameterization restricted to
    (mu_{mu_idx}, a^(2..M)_{al_idx}), and P the curvature of the active group
    penalty mapped through the elimination.
    """
    M = K.shape[0]
    smu = np.asarray(mu_idx, dtype=np.intp)
    sal = np.asarray(al_idx, dtype=np.intp)
    if M < 2:
        sal = np.empty(0, dtype=np.intp)
    nmu, nal = smu.size, sal.size
    q = nmu + (M - 1) * nal
    if q == 0:
        return 0.0
    B = np.zeros((q, q))
    Kw = K * w[:, None, None]
    Kbar = Kw.sum(axis=0)
    B[:nmu, :nmu] = 2.0 * Kbar[np.ix_(smu, smu)]
    for m in range(2, M + 1):
        rows = slice(nmu + (m - 2) * nal, nmu + (m - 1) * nal)
        cross = 2.0 * (Kw[m - 1] - Kw[0])[np.ix_(smu, sal)]
        B[:nmu, rows] = cross
        B[rows, :nmu] = cross.T
        for l in range(2, M + 1):
            cols = slice(nmu + (l - 2) * nal, nmu + (l - 1) * nal)
            blk = 2.0 * Kw[0][np.ix_(sal, sal)]
            if l == m:
                blk = blk + 2.0 * Kw[m - 1][np.ix_(sal, sal)]
            B[rows, cols] = blk
    A = B.copy()
    if nal and pen_scale > 0.0:
        T = _elimination_map(M)
        for jj, j in enumerate(sal):
            if j == 0:
                continue  # site intercepts are unpenalized
            aj = alpha[:, j]
            r = np.linalg.norm(aj)
            if r == 0.0:
                continue
            P = np.eye(M) / r - np.outer(aj, aj) / r**3
            contrib = pen_scale * (T.T @ P @ T)
            for m in range(M - 1):
                for l in range(M - 1):
                    A[nmu + m * nal + jj, nmu + l * nal + jj] += contrib[m, l]
    try:
        sol = np.linalg.solve(A, B)
    except np.linalg.LinAlgError:
        raise SingularityError(
            f"restricted curvature block ({q}x{q}: {nmu} shared, "
            f"{nal} deviation groups) is singular") from None
    return float(np.trace(sol))


def active_sets(bundle):
    """Restricted index sets: intercepts always free, others when nonzero."""
    mu_idx = np.concatenate([[0], bundle.active_mu]).astype(np.intp)
    if bundle.n_sites >= 2:
        al_idx = np.concatenate([[0], bundle.active_alpha]).astype(np.intp)
    else:
        al_idx = np.empty(0, dtype=np.intp)
    return mu_idx, al_idx


def degrees_of_freedom(summaries, bundle, cfg) -> float:
    """Trace-based model degrees of freedom of the aggregation fit."""
    H, g, w, order = _stack(summaries)
    _check_bundle(bundle, *g.shape)
    mu_idx, al_idx = active_sets(bundle)
    return trace_df(H, w, bundle.alpha[order], mu_idx, al_idx,
                    cfg.lam * cfg.lambda_g)


@dataclass
class GicResult:
    lam: float
    lambda_g: float
    deviance: float
    df: float
    gic: float
    bundle: CoefficientBundle


def default_lambda_g_grid(n_sites: int) -> np.ndarray:
    return np.array(LAMBDA_G_FACTORS) / np.sqrt(n_sites)


def default_lambda_grid(summaries, lambda_g_grid, n_points=N_LAMBDA) -> np.ndarray:
    top = max(lambda_crit(summaries, lg) for lg in lambda_g_grid)
    return np.geomspace(top, LAMBDA_FLOOR_RATIO * top, n_points)


def select_by_gic(summaries, lambda_grid=None, lambda_g_grid=None,
                  schedule=GammaSchedule.BIC, kkt_tol=1e-7,
                  return_table=False):
    """Solve over the (lam, lam_g) grid, warm-started down each lam path,
    and return the point minimizing GIC; ties favor the sparser model
    (larger lam, then larger lam_g).  With return_table=True, also return
    every evaluated grid point."""
    if lambda_g_grid is None:
        M = len(list(summaries))
        lambda_g_grid = default_lambda_g_grid(M)
    lambda_g_grid = np.sort(np.asarray(lambda_g_grid, dtype=float))[::-1]
    if lambda_grid is None:
        lambda_grid = default_lambda_grid(summaries, lambda_g_grid)
    lambda_grid = np.sort(np.asarray(lambda_grid, dtype=float))[::-1]
    N = sum(s.n for s in summaries)
    p = next(iter(summaries)).p
    gamma = gamma_value(schedule, N, p)
    results = []
    failures = []
    for lg in lambda_g_grid:
        bundle = None
        for lam in lambda_grid:
            cfg = PenaltyConfig(lam=float(lam), lambda_g=float(lg),
                                gamma_schedule=schedule)
            try:
                bundle = solve_shir(summaries, cfg, init=bundle, kkt_tol=kkt_tol)
            except ConvergenceError as err:
                failures.append((lam, lg, err))
                continue
            dev = deviance(summaries, bundle)
            df = degrees_of_freedom(summaries, bundle, cfg)
            results.append(GicResult(lam=float(lam), lambda_g=float(lg),
                                     deviance=dev, df=df,
                                     gic=dev + gamma * df, bundle=bundle))
    if not results:
        raise ConvergenceError(
            f"no grid point converged ({len(failures)} failures)")
    best = min(results, key=lambda r: (r.gic, -r.lam, -r.lambda_g))
    if return_table:
        return best, results
    return best
