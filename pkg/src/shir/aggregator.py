"""Central aggregation: minimize the summary-based quadratic surrogate with a
mixture penalty (l1 on the shared effect, group-l2 on per-site deviations)
under the sum-to-zero identifiability constraint.

The objective, with weights w_m = n_m / N and beta^(m) = mu + alpha^(m), is

    sum_m w_m (beta^(m)' H_m beta^(m) - 2 beta^(m)' g_m)
        + lam * ( ||mu_{-1}||_1 + lam_g * sum_{j>=2} ||alpha_j||_2 ),
    subject to sum_m alpha_j^(m) = 0 for every j.

Only (n_m, H_m, g_m) enter: the solver never touches raw data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._kernels import shir_sweep
from .data import CoefficientBundle, PenaltyConfig, check_summaries
from .errors import ContractViolation, ConvergenceError, SingularityError

SWEEP_TOL = 1e-10
MM_TOL = 1e-10
MM_MAX = 100_000
MAX_SWEEPS = 100_000
KKT_TOL = 1e-7


def _stack(summaries):
    """Stack summaries in canonical (site_id-sorted) order.

    All cross-site reductions happen in this order, which makes every result
    bit-identical under permutations of the input sequence.  Returns the
    stacked arrays plus the positions of the canonical rows in the input.
    """
    summaries = check_summaries(summaries)
    order = sorted(range(len(summaries)), key=lambda i: str(summaries[i].site_id))
    H = np.stack([summaries[i].H for i in order])
    g = np.stack([summaries[i].g for i in order])
    n = np.array([summaries[i].n for i in order], dtype=float)
    w = n / n.sum()
    return H, g, w, np.asarray(order)


def _check_bundle(bundle, M, p):
    if bundle.n_sites != M or bundle.p != p:
        raise ContractViolation(
            f"bundle has shape ({bundle.n_sites}, {bundle.p}), summaries need ({M}, {p})")


def shir_objective(summaries, bundle, cfg) -> float:
    """Penalized surrogate value at the given coefficients."""
    H, g, w, order = _stack(summaries)
    _check_bundle(bundle, *g.shape)
    beta = bundle.beta[order]
    quad = 0.0
    for m in range(g.shape[0]):
        quad += w[m] * (beta[m] @ (H[m] @ beta[m]) - 2.0 * (g[m] @ beta[m]))
    pen = np.abs(bundle.mu[1:]).sum()
    pen += cfg.lambda_g * np.linalg.norm(bundle.alpha[:, 1:], axis=0).sum()
    return float(quad + cfg.lam * pen)


def smooth_gradients(summaries, bundle):
    """Gradients of the smooth surrogate part, in the input site order.

    Returns (G_mu, G_alpha): G_mu is the length-p gradient with respect to mu
    and G_alpha the M x p matrix of gradients with respect to alpha^(m).
    """
    H, g, w, order = _stack(summaries)
    _check_bundle(bundle, *g.shape)
    beta = bundle.beta[order]
    U = np.einsum("mij,mj->mi", H, beta)
    G_alpha = 2.0 * w[:, None] * (U - g)
    G_alpha_in = np.empty_like(G_alpha)
    G_alpha_in[order] = G_alpha
    return G_alpha.sum(axis=0), G_alpha_in


def kkt_from_gradients(G_mu, G_alpha, bundle, lam, lam_g) -> float:
    """KKT residual of the mixture-penalty problem given smooth gradients."""
    res = abs(G_mu[0])
    mu = bundle.mu
    for j in range(1, mu.shape[0]):
        if mu[j] != 0.0:
            res = max(res, abs(G_mu[j] + lam * np.sign(mu[j])))
        else:
            res = max(res, max(0.0, abs(G_mu[j]) - lam))
    M = bundle.n_sites
    if M >= 2:
        PG = G_alpha - G_alpha.mean(axis=0, keepdims=True)
        A = bundle.alpha
        res = max(res, np.abs(PG[:, 0]).max())
        norms = np.linalg.norm(A[:, 1:], axis=0)
        for jj, nrm in enumerate(norms):
            j = jj + 1
            if nrm != 0.0:
                res = max(res, np.abs(PG[:, j] + lam * lam_g * A[:, j] / nrm).max())
            else:
                res = max(res, max(0.0, np.linalg.norm(PG[:, j]) - lam * lam_g))
    return float(res)


def kkt_residual(summaries, bundle, cfg) -> float:
    """Maximum optimality violation of the constrained mixture-penalty problem.

    Covers: intercept stationarity, active-mu stationarity, the inactive-mu
    subgradient bound lam, active-alpha block stationarity inside the
    constraint hyperplane, and the inactive-alpha dual bound lam * lam_g.
    """
    if bundle.max_constraint_violation() > 1e-8:
        raise ContractViolation("bundle violates the sum-to-zero constraint")
    G_mu, G_alpha = smooth_gradients(summaries, bundle)
    return kkt_from_gradients(G_mu, G_alpha, bundle, cfg.lam, cfg.lambda_g)


def null_bundle(summaries) -> CoefficientBundle:
    """Intercept-only solution: per-site optimal intercepts, all else zero."""
    H, g, w, order = _stack(summaries)
    M, p = g.shape
    b1 = g[:, 0] / H[:, 0, 0]
    mu = np.zeros(p)
    mu[0] = b1.mean()
    alpha = np.zeros((M, p))
    alpha[order, 0] = b1 - mu[0]
    return CoefficientBundle(mu=mu, alpha=alpha)


def lambda_crit(summaries, lambda_g) -> float:
    """Smallest lam for which the intercept-only model satisfies the KKT system."""
    if lambda_g <= 0:
        raise ContractViolation("lambda_g must be positive to bound the group part")
    bundle = null_bundle(summaries)
    G_mu, G_alpha = smooth_gradients(summaries, bundle)
    bound = float(np.abs(G_mu[1:]).max())
    if bundle.n_sites >= 2:
        PG = G_alpha - G_alpha.mean(axis=0, keepdims=True)
        bound = max(bound, float(np.linalg.norm(PG[:, 1:], axis=0).max()) / lambda_g)
    return bound


@dataclass
class SolveInfo:
    objective: float
    sweeps: int
    kkt: float
    history: list[float] = field(default_factory=list)


def solve_shir(summaries, cfg, init=None, *, tol=SWEEP_TOL, max_sweeps=MAX_SWEEPS,
               kkt_tol=KKT_TOL, return_info=False):
    """Block coordinate descent for the constrained mixture-penalty surrogate.

    Cycles j = 1..p; per column soft-thresholds mu_j, then drives the alpha_j
    block to its constrained minimizer with inner majorize-minimize steps.
    Terminates when a full sweep changes the objective by less than
    tol * (1 + |objective|) and the KKT residual is below kkt_tol.

    Sites are processed in canonical (site_id-sorted) order internally, so
    the result is bit-identical under permutations of the input sequence;
    alpha rows come back in the order the summaries were given.
    """
    H, g, w, order = _stack(summaries)
    M, p = g.shape
    if cfg.lam == 0.0:
        ids = [str(s.site_id) for s in summaries]
        for m in range(M):
            try:
                np.linalg.cholesky(H[m])
            except np.linalg.LinAlgError:
                raise SingularityError(
                    f"lambda = 0 requires strictly positive-definite H; "
                    f"site {sorted(ids)[m]!r} fails") from None
    if init is None:
        mu = np.zeros(p)
        A = np.zeros((M, p))
    else:
        _check_bundle(init, M, p)
        mu = init.mu.copy()
        A = init.alpha[order]
        A = A - A.mean(axis=0, keepdims=True)
    U = np.einsum("mij,mj->mi", H, mu[None, :] + A)
    history: list[float] = []
    prev = np.inf
    mm_tol = MM_TOL
    kkt = np.inf
    converged = False

    def finish(mu, A):
        alpha = np.empty_like(A)
        alpha[order] = A - A.mean(axis=0, keepdims=True)
        return CoefficientBundle(mu=mu.copy(), alpha=alpha)

    for sweep in range(max_sweeps):
        obj = shir_sweep(H, g, w, cfg.lam, cfg.lambda_g, mu, A, U, mm_tol, MM_MAX)
        history.append(obj)
        assert obj <= prev + 1e-12 * (1.0 + abs(obj)), "objective increased"
        if abs(prev - obj) < tol * (1.0 + abs(obj)):
            bundle = finish(mu, A)
            kkt = kkt_residual(summaries, bundle, cfg)
            if kkt <= kkt_tol:
                converged = True
                break
            mm_tol = max(mm_tol * 1e-2, 1e-15)
            U = np.einsum("mij,mj->mi", H, mu[None, :] + A)
        elif (sweep + 1) % 64 == 0:
            # refresh the running products to cap incremental rounding drift
            U = np.einsum("mij,mj->mi", H, mu[None, :] + A)
        prev = obj
    if not converged:
        raise ConvergenceError(
            f"aggregator did not converge: KKT residual {kkt:.3e}", residual=kkt)
    if return_info:
        return bundle, SolveInfo(objective=history[-1], sweeps=len(history),
                                 kkt=float(kkt), history=history)
    return bundle
