"""Independent reference implementations used only by the test suite.

Everything here is deliberately written as a separate path from the package:
scalar loops instead of vectorized linear algebra, and projected subgradient
descent with adaptive Polyak levels instead of coordinate descent.  The
subgradient oracles certify minimizers of the same objectives the package
solvers claim to minimize.
"""

import math

import numpy as np
from numba import njit


# ---------------------------------------------------------------------------
# scalar-loop references for the loss primitives

def scalar_loss(X, y, beta, family):
    n, p = X.shape
    total = 0.0
    for i in range(n):
        a = 0.0
        for j in range(p):
            a += beta[j] * X[i, j]
        if family == "squared-error":
            total += (y[i] - a) ** 2
        else:
            total += -y[i] * a + max(a, 0.0) + math.log1p(math.exp(-abs(a)))
    return total / n


def scalar_gradient(X, y, beta, family):
    n, p = X.shape
    out = np.zeros(p)
    for i in range(n):
        a = sum(beta[j] * X[i, j] for j in range(p))
        if family == "squared-error":
            d1 = -2.0 * (y[i] - a)
        else:
            s = 1.0 / (1.0 + math.exp(-a)) if a >= 0 else math.exp(a) / (1.0 + math.exp(a))
            d1 = s - y[i]
        for j in range(p):
            out[j] += d1 * X[i, j]
    return out / n


def scalar_hessian(X, y, beta, family):
    n, p = X.shape
    out = np.zeros((p, p))
    for i in range(n):
        a = sum(beta[j] * X[i, j] for j in range(p))
        if family == "squared-error":
            d2 = 2.0
        else:
            s = 1.0 / (1.0 + math.exp(-a)) if a >= 0 else math.exp(a) / (1.0 + math.exp(a))
            d2 = s * (1.0 - s)
        for j in range(p):
            for k in range(p):
                out[j, k] += d2 * X[i, j] * X[i, k]
    return out / n


def scalar_shir_objective(summaries, mu, alpha, lam, lam_g):
    N = sum(s.n for s in summaries)
    total = 0.0
    for m, s in enumerate(summaries):
        p = s.p
        beta = [mu[j] + alpha[m, j] for j in range(p)]
        for j in range(p):
            hb = 0.0
            for k in range(p):
                hb += s.H[j, k] * beta[k]
            total += s.n * beta[j] * (hb - 2.0 * s.g[j]) / N
    pen = 0.0
    for j in range(1, len(mu)):
        pen += abs(mu[j])
        pen += lam_g * math.sqrt(sum(alpha[m, j] ** 2 for m in range(len(summaries))))
    return total + lam * pen


def fd_gradient(f, x, step=1e-6):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    for j in range(x.size):
        h = step * (1.0 + abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        out[j] = (f(xp) - f(xm)) / (2.0 * h)
    return out


def fd_hessian(f, x, step=1e-5):
    x = np.asarray(x, dtype=float)
    d = x.size
    out = np.zeros((d, d))
    for j in range(d):
        hj = step * (1.0 + abs(x[j]))
        for k in range(j, d):
            hk = step * (1.0 + abs(x[k]))
            xpp, xpm, xmp, xmm = x.copy(), x.copy(), x.copy(), x.copy()
            xpp[j] += hj; xpp[k] += hk
            xpm[j] += hj; xpm[k] -= hk
            xmp[j] -= hj; xmp[k] += hk
            xmm[j] -= hj; xmm[k] -= hk
            out[j, k] = out[k, j] = (f(xpp) - f(xpm) - f(xmp) + f(xmm)) / (4.0 * hj * hk)
    return out


# ---------------------------------------------------------------------------
# generic projected subgradient with adaptive Polyak target levels

def polyak_subgradient(F, G, proj, x0, tol_gap=1e-10, inner=2000, max_levels=60):
    """Minimize F via projected subgradient steps; returns (x_best, f_best).

    Polyak step sizes aim at the level f_best - delta; whenever the level is
    unreachable within the inner budget, delta is halved.  Terminates once
    delta falls below tol_gap * (1 + |f_best|).
    """
    x = proj(np.array(x0, dtype=float))
    fbest = F(x)
    xbest = x.copy()
    delta = 0.5 * (1.0 + abs(fbest))
    levels = 0
    while delta > tol_gap * (1.0 + abs(fbest)) and levels < max_levels:
        target = fbest - delta
        hit = False
        for _ in range(inner):
            g = G(x)
            gn2 = float(g @ g)
            if gn2 == 0.0:
                return x, F(x)
            t = (F(x) - target) / gn2
            x = proj(x - t * g)
            f = F(x)
            if f < fbest:
                fbest = f
                xbest = x.copy()
            if f <= target:
                hit = True
                break
        if not hit:
            delta *= 0.5
            levels += 1
    return xbest, fbest


# ---------------------------------------------------------------------------
# jitted oracle for the quadratic aggregation objective (used 50x in the
# acceptance suite, so speed matters)

@njit(cache=True)
def _shir_F(H, g, w, lam, lam_g, mu, A):
    M, p = g.shape
    val = 0.0
    for m in range(M):
        for j in range(p):
            hb = 0.0
            for k in range(p):
                hb += H[m, j, k] * (mu[k] + A[m, k])
            val += w[m] * (mu[j] + A[m, j]) * (hb - 2.0 * g[m, j])
    for j in range(1, p):
        val += lam * abs(mu[j])
        nrm = 0.0
        for m in range(M):
            nrm += A[m, j] * A[m, j]
        val += lam * lam_g * np.sqrt(nrm)
    return val


@njit(cache=True)
def _shir_G(H, g, w, lam, lam_g, mu, A, gmu, gA):
    M, p = g.shape
    for j in range(p):
        gmu[j] = 0.0
    for m in range(M):
        for j in range(p):
            hb = 0.0
            for k in range(p):
                hb += H[m, j, k] * (mu[k] + A[m, k])
            gA[m, j] = 2.0 * w[m] * (hb - g[m, j])
            gmu[j] += gA[m, j]
    for j in range(1, p):
        if mu[j] > 0.0:
            gmu[j] += lam
        elif mu[j] < 0.0:
            gmu[j] -= lam
        nrm = 0.0
        for m in range(M):
            nrm += A[m, j] * A[m, j]
        nrm = np.sqrt(nrm)
        if nrm > 0.0:
            for m in range(M):
                gA[m, j] += lam * lam_g * A[m, j] / nrm


@njit(cache=True)
def oracle_shir_quadratic(H, g, w, lam, lam_g, tol_gap=1e-12, inner=3000,
                          max_total=2_000_000):
    """Projected-subgradient minimizer of the aggregation objective.

    Returns (mu, A, f_best).  Independent of the package solver: full
    subgradient steps on the joint (mu, alpha) vector, with the sum-to-zero
    constraint enforced by projection after every step.  Each Polyak level
    restarts from the incumbent so a wandering iterate cannot poison
    progress; a level that cannot be reached within the inner budget halves
    the target gap.
    """
    M, p = g.shape
    mu = np.zeros(p)
    A = np.zeros((M, p))
    mub = mu.copy()
    Ab = A.copy()
    gmu = np.empty(p)
    gA = np.empty((M, p))
    fbest = _shir_F(H, g, w, lam, lam_g, mu, A)
    delta = 0.5 * (1.0 + abs(fbest))
    total = 0
    while delta > tol_gap * (1.0 + abs(fbest)) and total < max_total:
        target = fbest - delta
        hit = False
        mu = mub.copy()
        A = Ab.copy()
        for _ in range(inner):
            total += 1
            _shir_G(H, g, w, lam, lam_g, mu, A, gmu, gA)
            gn2 = 0.0
            for j in range(p):
                gn2 += gmu[j] * gmu[j]
            for m in range(M):
                for j in range(p):
                    gn2 += gA[m, j] * gA[m, j]
            if gn2 == 0.0:
                return mu, A, _shir_F(H, g, w, lam, lam_g, mu, A)
            f = _shir_F(H, g, w, lam, lam_g, mu, A)
            if not np.isfinite(f) or f > fbest + 1e3 * (1.0 + abs(fbest)):
                mu = mub.copy()
                A = Ab.copy()
                f = fbest
            t = (f - target) / gn2
            for j in range(p):
                mu[j] -= t * gmu[j]
            for j in range(p):
                colmean = 0.0
                for m in range(M):
                    A[m, j] -= t * gA[m, j]
                    colmean += A[m, j]
                colmean /= M
                for m in range(M):
                    A[m, j] -= colmean
            f = _shir_F(H, g, w, lam, lam_g, mu, A)
            if f < fbest:
                fbest = f
                mub = mu.copy()
                Ab = A.copy()
            if f <= target:
                hit = True
                break
        if not hit:
            delta *= 0.5
    return mub, Ab, fbest


@njit(cache=True)
def _power_lipschitz(H, w, iters=200):
    """2 * largest eigenvalue of the smooth quadratic part, by power iteration."""
    M, p = H.shape[0], H.shape[1]
    mu = np.ones(p)
    A = np.ones((M, p))
    for m in range(M):
        for j in range(p):
            A[m, j] = 0.1 * (m + 1) + 0.01 * j
    lam_est = 1.0
    for _ in range(iters):
        nmu = np.zeros(p)
        nA = np.zeros((M, p))
        for m in range(M):
            for j in range(p):
                hb = 0.0
                for k in range(p):
                    hb += H[m, j, k] * (mu[k] + A[m, k])
                val = 2.0 * w[m] * hb
                nA[m, j] = val
                nmu[j] += val
        norm = 0.0
        for j in range(p):
            norm += nmu[j] * nmu[j]
        for m in range(M):
            for j in range(p):
                norm += nA[m, j] * nA[m, j]
        norm = np.sqrt(norm)
        if norm == 0.0:
            return 1.0
        lam_est = norm
        for j in range(p):
            mu[j] = nmu[j] / norm
        for m in range(M):
            for j in range(p):
                A[m, j] = nA[m, j] / norm
    return lam_est


@njit(cache=True)
def prox_gradient_polish(H, g, w, lam, lam_g, mu0, A0, max_iter=200_000,
                         tol=1e-15):
    """Full-vector proximal gradient descent from a warm start.

    Smooth gradient step with a global 1/L step size, then the closed-form
    proximal map of the penalty: componentwise soft threshold on mu, and
    hyperplane projection followed by group soft threshold on each alpha
    column.  Used to finish what the subgradient phase started; converges
    linearly on strongly convex instances.
    """
    M, p = g.shape
    L = _power_lipschitz(H, w)
    eta = 1.0 / L
    mu = mu0.copy()
    A = A0.copy()
    fprev = _shir_F(H, g, w, lam, lam_g, mu, A)
    stall = 0
    for _ in range(max_iter):
        for j in range(p):
            colmean = 0.0
            for m in range(M):
                colmean += A[m, j]
            colmean /= M
            for m in range(M):
                A[m, j] -= colmean
        # gradient step
        gmu = np.zeros(p)
        gA = np.empty((M, p))
        for m in range(M):
            for j in range(p):
                hb = 0.0
                for k in range(p):
                    hb += H[m, j, k] * (mu[k] + A[m, k])
                gA[m, j] = 2.0 * w[m] * (hb - g[m, j])
                gmu[j] += gA[m, j]
        for j in range(p):
            mu[j] -= eta * gmu[j]
            for m in range(M):
                A[m, j] -= eta * gA[m, j]
        # prox of the penalty
        for j in range(1, p):
            t = abs(mu[j]) - eta * lam
            mu[j] = 0.0 if t <= 0.0 else (t if mu[j] > 0.0 else -t)
        for j in range(p):
            colmean = 0.0
            for m in range(M):
                colmean += A[m, j]
            colmean /= M
            nrm = 0.0
            for m in range(M):
                A[m, j] -= colmean
                nrm += A[m, j] * A[m, j]
            if j >= 1:
                nrm = np.sqrt(nrm)
                thr = eta * lam * lam_g
                if nrm <= thr:
                    for m in range(M):
                        A[m, j] = 0.0
                else:
                    sc = 1.0 - thr / nrm
                    for m in range(M):
                        A[m, j] *= sc
        f = _shir_F(H, g, w, lam, lam_g, mu, A)
        if abs(fprev - f) <= tol * (1.0 + abs(f)):
            stall += 1
            if stall >= 20:
                break
        else:
            stall = 0
        fprev = f
    return mu, A, f


def oracle_shir(H, g, w, lam, lam_g):
    """Two-phase independent oracle: subgradient descent, then prox polish."""
    mu, A, _ = oracle_shir_quadratic(H, g, w, lam, lam_g,
                                     tol_gap=1e-8, max_total=300_000)
    return prox_gradient_polish(H, g, w, lam, lam_g, mu, A)
