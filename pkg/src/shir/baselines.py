"""The three comparator estimators.

* the idealized pooled estimator, which sees all raw data (benchmark only,
  it breaks the summary-only boundary by design),
* the one-shot debiased-lasso aggregation with nodewise precision matrices
  and hard/soft thresholding of the averaged estimates,
* screened sparse meta-analysis: per-site MLEs after marginal screening,
  combined through an inverse-variance quadratic with a square-root
  hierarchical penalty.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import families
from ._kernels import gram_lasso_cd
from .aggregator import kkt_from_gradients, lambda_crit, solve_shir
from .data import (CoefficientBundle, GammaSchedule, LocalSummary,
                   PenaltyConfig, StudyData, gamma_value)
from .errors import (ContractViolation, ConvergenceError, SingularityError,
                     SiteError)
from .families import as_family
from .local import LocalFit, intercept_only
from .tuning import trace_df

# nodewise penalty rule: lambda_j = NODEWISE_C * sqrt(log p / n); the constant
# was fixed once by the diagonal consistency check |(Theta H)_jj - 1| on
# AR(1)-correlated designs and is not re-tuned per call
NODEWISE_C = 0.5

IPD_MAX_OUTER = 50
IPD_TOL = 1e-9


# ---------------------------------------------------------------------------
# idealized pooled estimator

def _check_datas(datas):
    datas = list(datas)
    if not datas:
        raise ContractViolation("at least one site is required")
    p = datas[0].p
    if any(d.p != p for d in datas):
        raise ContractViolation("all sites must share the design dimension")
    return datas


def exact_summaries(datas, family, bundle):
    """Second-order summaries of the exact loss at the bundle's coefficients."""
    out = []
    beta = bundle.beta
    for m, d in enumerate(datas):
        H = families.hessian(d, beta[m], family)
        g = H @ beta[m] - families.gradient(d, beta[m], family)
        out.append(LocalSummary(site_id=d.site_id, n=d.n, H=H, g=g, family=family))
    return out


def ipd_objective(datas, family, bundle, cfg) -> float:
    """Exact pooled penalized loss at the bundle."""
    N = sum(d.n for d in datas)
    beta = bundle.beta
    val = 0.0
    for m, d in enumerate(datas):
        val += d.n * families.empirical_loss(d, beta[m], family) / N
    pen = np.abs(bundle.mu[1:]).sum()
    pen += cfg.lambda_g * np.linalg.norm(bundle.alpha[:, 1:], axis=0).sum()
    return float(val + cfg.lam * pen)


def kkt_residual_ipd(datas, family, bundle, cfg) -> float:
    """KKT residual of the exact pooled problem at the bundle."""
    N = sum(d.n for d in datas)
    beta = bundle.beta
    G_alpha = np.stack([
        d.n * families.gradient(d, beta[m], family) / N
        for m, d in enumerate(datas)])
    return kkt_from_gradients(G_alpha.sum(axis=0), G_alpha, bundle,
                              cfg.lam, cfg.lambda_g)


def fit_ipd(datas, family, cfg, init=None, *, max_outer=IPD_MAX_OUTER,
            tol=IPD_TOL, kkt_tol=1e-7) -> CoefficientBundle:
    """Minimize the exact pooled penalized loss under the sum-to-zero constraint.

    Outer IRLS loop: expand the loss to second order at the current bundle
    and hand the quadratic to the aggregation solver.  The surrogate's
    quadratic form is twice the Taylor expansion, so the inner penalty weight
    is 2 * cfg.lam.  Exact in one step for the squared-error family.
    """
    family = as_family(family)
    datas = _check_datas(datas)
    M, p = len(datas), datas[0].p
    bundle = init or CoefficientBundle(mu=np.zeros(p), alpha=np.zeros((M, p)))
    inner_cfg = PenaltyConfig(lam=2.0 * cfg.lam, lambda_g=cfg.lambda_g,
                              gamma_schedule=cfg.gamma_schedule)
    obj = ipd_objective(datas, family, bundle, cfg)
    for outer in range(max_outer):
        sums = exact_summaries(datas, family, bundle)
        new = solve_shir(sums, inner_cfg, init=bundle, kkt_tol=np.inf,
                         max_sweeps=20_000)
        new_obj = ipd_objective(datas, family, new, cfg)
        halvings = 0
        while new_obj > obj + 1e-12 * (1.0 + abs(obj)) and halvings < 30:
            new = CoefficientBundle(mu=0.5 * (new.mu + bundle.mu),
                                    alpha=0.5 * (new.alpha + bundle.alpha))
            new_obj = ipd_objective(datas, family, new, cfg)
            halvings += 1
        change = max(np.abs(new.mu - bundle.mu).max(),
                     np.abs(new.alpha - bundle.alpha).max())
        bundle, obj = new, new_obj
        if change < tol and (outer > 0 or family is families.LossFamily.SQUARED):
            res = kkt_residual_ipd(datas, family, bundle, cfg)
            if res <= kkt_tol:
                return bundle
    res = kkt_residual_ipd(datas, family, bundle, cfg)
    if res > kkt_tol:
        raise ConvergenceError(
            f"pooled fit did not converge: KKT residual {res:.3e}", residual=res)
    return bundle


def ipd_null_bundle(datas, family) -> CoefficientBundle:
    """Per-site intercept-only fits decomposed into (mu, alpha)."""
    datas = _check_datas(datas)
    M, p = len(datas), datas[0].p
    b1 = np.array([intercept_only(d, family)[0] for d in datas])
    mu = np.zeros(p)
    mu[0] = b1.mean()
    alpha = np.zeros((M, p))
    alpha[:, 0] = b1 - mu[0]
    return CoefficientBundle(mu=mu, alpha=alpha)


def select_ipd_by_gic(datas, family, lambda_grid=None, lambda_g_grid=None,
                      schedule=GammaSchedule.BIC):
    """Tune the pooled estimator by GIC on the exact loss.

    Deviance is 2 * the pooled average loss; DF is the same restricted trace
    as the aggregator's, evaluated with the exact per-site Hessians.
    """
    from .tuning import GicResult, active_sets, default_lambda_g_grid

    family = as_family(family)
    datas = _check_datas(datas)
    M = len(datas)
    N = sum(d.n for d in datas)
    w = np.array([d.n for d in datas], dtype=float) / N
    if lambda_g_grid is None:
        lambda_g_grid = default_lambda_g_grid(M)
    lambda_g_grid = np.sort(np.asarray(lambda_g_grid, dtype=float))[::-1]
    if lambda_grid is None:
        null = ipd_null_bundle(datas, family)
        nsums = exact_summaries(datas, family, null)
        top = max(lambda_crit(nsums, lg) for lg in lambda_g_grid) / 2.0
        lambda_grid = np.geomspace(top, 1e-3 * top, 50)
    lambda_grid = np.sort(np.asarray(lambda_grid, dtype=float))[::-1]
    gamma = gamma_value(schedule, N, datas[0].p)
    results = []
    failures = []
    for lg in lambda_g_grid:
        bundle = None
        for lam in lambda_grid:
            cfg = PenaltyConfig(lam=float(lam), lambda_g=float(lg),
                                gamma_schedule=schedule)
            try:
                bundle = fit_ipd(datas, family, cfg, init=bundle)
            except ConvergenceError as err:
                failures.append((lam, lg, err))
                continue
            beta = bundle.beta
            dev = 2.0 * sum(w[m] * families.empirical_loss(datas[m], beta[m], family)
                            for m in range(M))
            K = np.stack([families.hessian(datas[m], beta[m], family)
                          for m in range(M)])
            mu_idx, al_idx = active_sets(bundle)
            df = trace_df(K, w, bundle.alpha, mu_idx, al_idx,
                          2.0 * cfg.lam * cfg.lambda_g)
            results.append(GicResult(lam=float(lam), lambda_g=float(lg),
                                     deviance=dev, df=df,
                                     gic=dev + gamma * df, bundle=bundle))
    if not results:
        raise ConvergenceError(f"no pooled grid point converged "
                               f"({len(failures)} failures)")
    results.sort(key=lambda r: (r.gic, -r.lam, -r.lambda_g))
    return results[0]


# ---------------------------------------------------------------------------
# debiased-lasso aggregation

class ThresholdKind(str, enum.Enum):
    HARD = "hard"
    SOFT = "soft"


@dataclass
class ThresholdRule:
    kind: ThresholdKind = ThresholdKind.SOFT
    tau1: float = 0.0
    tau2: float = 0.0

    def __post_init__(self):
        self.kind = ThresholdKind(self.kind)
        if self.tau1 < 0 or self.tau2 < 0:
            raise ContractViolation("thresholds must be nonnegative")


@dataclass
class PrecisionEstimate:
    """Regularized inverse of a site's Hessian, from nodewise regressions."""

    theta: np.ndarray
    lambdas: np.ndarray

    def __post_init__(self):
        self.theta = np.ascontiguousarray(self.theta, dtype=np.float64)
        self.lambdas = np.atleast_1d(np.asarray(self.lambdas, dtype=np.float64))
        if not np.isfinite(self.theta).all():
            raise ContractViolation("precision estimate has non-finite entries")
        if np.any(np.diag(self.theta) <= 0):
            raise ContractViolation("precision diagonal must be positive")


def threshold_vector(x, tau, kind) -> np.ndarray:
    """Componentwise hard/soft threshold, sparing the intercept (index 0)."""
    kind = ThresholdKind(kind)
    out = np.array(x, dtype=float)
    body = out[1:]
    if kind is ThresholdKind.HARD:
        body[np.abs(body) <= tau] = 0.0
    else:
        body[:] = np.sign(body) * np.maximum(np.abs(body) - tau, 0.0)
    return out


def threshold_groups(alpha, tau, kind) -> np.ndarray:
    """Columnwise group threshold of an M x p deviation matrix, sparing j = 0."""
    kind = ThresholdKind(kind)
    out = np.array(alpha, dtype=float)
    norms = np.linalg.norm(out[:, 1:], axis=0)
    if kind is ThresholdKind.HARD:
        scale = (norms > tau).astype(float)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(norms > tau, 1.0 - tau / norms, 0.0)
    out[:, 1:] *= scale
    return out


def nodewise_precision(data, family, beta_hat, c=NODEWISE_C,
                       lambdas=None) -> PrecisionEstimate:
    """Columnwise lasso on the curvature-weighted design, assembled into a
    regularized inverse Hessian.

    Each column of the weighted design is regressed on the others (on the
    per-column normalized scale); row j of the estimate is the standard
    construction (1, -gamma_j) / tau_j^2 with tau_j^2 the penalized residual
    second moment.
    """
    family = as_family(family)
    beta_hat = np.asarray(beta_hat, dtype=float)
    G = families.hessian(data, beta_hat, family)
    p = G.shape[0]
    d = np.sqrt(np.diag(G))
    if np.any(d <= 0):
        j = int(np.flatnonzero(d <= 0)[0])
        raise SingularityError(f"degenerate weighted-design column {j}")
    Gt = G / np.outer(d, d)
    if lambdas is None:
        lambdas = np.full(p, c * np.sqrt(np.log(p) / data.n))
    else:
        lambdas = np.broadcast_to(np.asarray(lambdas, dtype=float), (p,)).copy()
    theta = np.zeros((p, p))
    pen = np.empty(p)
    for j in range(p):
        pen[:] = 2.0 * lambdas[j]
        pen[j] = 1e300  # forces gamma_j = 0: the kernel runs over k != j
        gamma = np.zeros(p)
        gram_lasso_cd(Gt, np.ascontiguousarray(Gt[:, j]), pen, gamma,
                      10_000, 1e-10)
        gamma[j] = 0.0
        resid_ms = Gt[j, j] - 2.0 * gamma @ Gt[:, j] + gamma @ (Gt @ gamma)
        tau2 = resid_ms + lambdas[j] * np.abs(gamma).sum()
        row = -gamma / tau2
        row[j] = 1.0 / tau2
        theta[j] = row
    theta = theta / np.outer(d, d)
    return PrecisionEstimate(theta=theta, lambdas=lambdas)


def debias_from_summary(summary, fit, precision) -> np.ndarray:
    """One-step bias correction beta - Theta (H beta - g)."""
    if precision is None:
        raise ContractViolation("a precision estimate is required to debias")
    beta = fit.beta if isinstance(fit, LocalFit) else np.asarray(fit, dtype=float)
    grad = summary.H @ beta - summary.g
    return beta - precision.theta @ grad


def combine_debiased(beta_d, rule) -> CoefficientBundle:
    """Central step: average the debiased estimates, split off deviations,
    then threshold componentwise (mu) and groupwise (alpha)."""
    beta_d = np.asarray(beta_d, dtype=float)
    mu = beta_d.mean(axis=0)
    alpha = beta_d - mu[None, :]
    return CoefficientBundle(
        mu=threshold_vector(mu, rule.tau1, rule.kind),
        alpha=threshold_groups(alpha, rule.tau2, rule.kind))


def fit_debias_lnb(sites, rule) -> CoefficientBundle:
    """Debiased-lasso aggregation from per-site (summary, fit, precision)."""
    beta_d = [debias_from_summary(s, f, t) for s, f, t in sites]
    return combine_debiased(np.stack(beta_d), rule)


def tune_thresholds(summaries, beta_d, kind=ThresholdKind.SOFT,
                    schedule=GammaSchedule.BIC, n_taus=30):
    """Pick (tau1, tau2) minimizing deviance + gamma_N * parameter count.

    The thresholded estimator has no penalized stationarity system, so DF is
    the plain parameter count |S_mu| + (M-1) |S_alpha|.
    """
    from .tuning import deviance

    beta_d = np.asarray(beta_d, dtype=float)
    M, p = beta_d.shape
    mu = beta_d.mean(axis=0)
    alpha = beta_d - mu[None, :]
    N = sum(s.n for s in summaries)
    gamma = gamma_value(schedule, N, p)
    tau1_grid = np.linspace(0.0, np.abs(mu[1:]).max(), n_taus)
    tau2_grid = np.linspace(0.0, np.linalg.norm(alpha[:, 1:], axis=0).max(),
                            n_taus)
    best = None
    for tau1 in tau1_grid[::-1]:
        mu_t = threshold_vector(mu, tau1, kind)
        for tau2 in tau2_grid[::-1]:
            al_t = threshold_groups(alpha, tau2, kind)
            bundle = CoefficientBundle(mu=mu_t, alpha=al_t)
            df = (len(bundle.active_mu)
                  + (M - 1) * len(bundle.active_alpha))
            gic = deviance(summaries, bundle) + gamma * df
            if best is None or gic < best[0]:
                best = (gic, ThresholdRule(kind=kind, tau1=float(tau1),
                                           tau2=float(tau2)), bundle)
    return best[1], best[2]


# ---------------------------------------------------------------------------
# screened sparse meta-analysis

def sis_screen(datas, family, screen_dim=None) -> np.ndarray:
    """Sure independence screening on site-size-weighted absolute marginal
    correlation; returns the kept feature indices (intercept always kept)."""
    datas = _check_datas(datas)
    p = datas[0].p
    if screen_dim is None:
        n_min = min(d.n for d in datas)
        screen_dim = int(n_min / (3.0 * np.log(n_min)))
    if screen_dim >= p - 1:
        return np.arange(p)
    score = np.zeros(p - 1)
    wsum = 0.0
    for d in datas:
        Xc = d.X[:, 1:] - d.X[:, 1:].mean(axis=0)
        yc = d.Y - d.Y.mean()
        sx = np.sqrt((Xc**2).mean(axis=0))
        sy = np.sqrt((yc**2).mean())
        with np.errstate(divide="ignore", invalid="ignore"):
            corr = np.where(sx * sy > 0, (Xc * yc[:, None]).mean(axis=0) / (sx * sy), 0.0)
        score += d.n * np.abs(corr)
        wsum += d.n
    keep = np.argsort(score / wsum)[::-1][:screen_dim]
    return np.concatenate([[0], np.sort(keep) + 1])


def site_mle(data, family, cols, max_iter=100) -> np.ndarray:
    """Unpenalized fit on the selected columns via damped Newton."""
    family = as_family(family)
    sub = StudyData(data.X[:, cols], data.Y, site_id=data.site_id)
    beta = intercept_only(sub, family)
    obj = families.empirical_loss(sub, beta, family)
    for _ in range(max_iter):
        grad = families.gradient(sub, beta, family)
        H = families.hessian(sub, beta, family)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            raise SiteError(f"singular Hessian in screened fit",
                            site_id=data.site_id) from None
        t = 1.0
        for _ in range(40):
            cand = beta - t * step
            cand_obj = families.empirical_loss(sub, cand, family)
            if cand_obj <= obj - 1e-4 * t * float(grad @ step):
                break
            t *= 0.5
        beta, obj = cand, cand_obj
        if np.abs(grad).max() < 1e-10:
            break
        if np.abs(beta).max() > 1e3:
            raise SiteError("screened fit diverged (separation?)",
                            site_id=data.site_id)
    else:
        if np.abs(families.gradient(sub, beta, family)).max() > 1e-6:
            raise SiteError("screened fit did not converge",
                            site_id=data.site_id)
    return beta


def fit_sma(datas, family, lam, screen_dim=None, lla_rounds=5,
            eps=1e-8) -> CoefficientBundle:
    """Screened meta-analysis with the square-root hierarchical penalty.

    Quadratic form as printed: N^-1 sum_m (b - b_m)' V_m^-1 (b - b_m) with
    V_m^-1 = n_m^-1 * (average-loss Hessian at the site MLE).  The nonconvex
    sum_j ||beta_j||_1^(1/2) penalty is handled by local linear approximation
    with eps-smoothing, lla_rounds reweighted l1 solves.
    """
    family = as_family(family)
    datas = _check_datas(datas)
    M, p = len(datas), datas[0].p
    cols = sis_screen(datas, family, screen_dim)
    q = cols.size
    if q >= min(d.n for d in datas):
        raise ContractViolation("post-screening dimension must be below the "
                                "smallest site size")
    N = sum(d.n for d in datas)
    breve = np.zeros((M, q))
    A = np.zeros((M, q, q))
    for m, d in enumerate(datas):
        breve[m] = site_mle(d, family, cols)
        sub = StudyData(d.X[:, cols], d.Y, site_id=d.site_id)
        Vinv = families.hessian(sub, breve[m], family) / d.n
        A[m] = Vinv / N
    beta = breve.copy()
    for _ in range(lla_rounds):
        group_l1 = np.abs(beta).sum(axis=0)
        weights = 0.5 / np.sqrt(group_l1 + eps)
        pen = lam * weights
        pen[0] = 0.0
        for m in range(M):
            x = beta[m].copy()
            gram_lasso_cd(A[m], A[m] @ breve[m], pen, x, 10_000, 1e-12)
            beta[m] = x
    full = np.zeros((M, p))
    full[:, cols] = beta
    mu = full.mean(axis=0)
    return CoefficientBundle(mu=mu, alpha=full - mu[None, :])


def sma_objective(datas, family, bundle, lam, screen_dim=None, eps=0.0) -> float:
    """The screened meta-analysis objective at the bundle (for diagnostics)."""
    family = as_family(family)
    datas = _check_datas(datas)
    cols = sis_screen(datas, family, screen_dim)
    N = sum(d.n for d in datas)
    beta = bundle.beta[:, cols]
    val = 0.0
    for m, d in enumerate(datas):
        sub = StudyData(d.X[:, cols], d.Y, site_id=d.site_id)
        bm = site_mle(d, family, cols)
        Vinv = families.hessian(sub, bm, family) / d.n
        diff = beta[m] - bm
        val += diff @ (Vinv @ diff) / N
    group_l1 = np.abs(bundle.beta[:, 1:]).sum(axis=0)
    val += lam * np.sqrt(group_l1 + eps).sum()
    return float(val)


def select_sma_by_gic(datas, family, lambda_grid=None,
                      schedule=GammaSchedule.BIC, screen_dim=None):
    """Tune the meta-analysis penalty by deviance + gamma_N * parameter count."""
    family = as_family(family)
    datas = _check_datas(datas)
    M = len(datas)
    N = sum(d.n for d in datas)
    w = np.array([d.n for d in datas], dtype=float) / N
    cols = sis_screen(datas, family, screen_dim)
    if lambda_grid is None:
        # bracket the null model by doubling, then span three decades
        lam_hi = 1e-6
        for _ in range(60):
            bundle = fit_sma(datas, family, lam_hi, screen_dim)
            if len(bundle.active_mu) == 0 and len(bundle.active_alpha) == 0:
                break
            lam_hi *= 2.0
        lambda_grid = np.geomspace(lam_hi, 1e-3 * lam_hi, 30)
    lambda_grid = np.sort(np.asarray(lambda_grid, dtype=float))[::-1]
    # curvature at the site MLEs, for a deviance on the aggregation scale
    K = []
    breve = np.zeros((M, cols.size))
    for m, d in enumerate(datas):
        sub = StudyData(d.X[:, cols], d.Y, site_id=d.site_id)
        breve[m] = site_mle(d, family, cols)
        K.append(families.hessian(sub, breve[m], family))
    gamma = gamma_value(schedule, N, datas[0].p)
    best = None
    for lam in lambda_grid:
        bundle = fit_sma(datas, family, float(lam), screen_dim)
        beta = bundle.beta[:, cols]
        dev = sum(w[m] * (beta[m] - breve[m]) @ (K[m] @ (beta[m] - breve[m]))
                  for m in range(M))
        df = float(np.count_nonzero(bundle.beta[:, 1:])) + M
        gic = dev + gamma * df
        if best is None or gic < best[0]:
            best = (gic, float(lam), bundle)
    return best[1], best[2]
