"""Numba kernels for the coordinate-descent inner loops.

Everything here operates on plain float64 arrays and is deterministic for a
fixed input.  The weighted least-squares kernel minimizes

    n^-1 sum_i (w_i/2)(z_i - x_i'beta)^2  +  sum_j pen_j |beta_j|,

the quadratic model of an average loss with curvature weights w_i = f''(a_i);
its KKT system at the expansion point coincides with the KKT system of the
true average loss, so the IRLS fixed point satisfies the exact optimality
conditions.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def wls_lasso_sweeps(X, z, w, pen, beta, r, a, max_sweeps, tol, history):
    """Cyclic CD on the penalized weighted quadratic; beta and r updated in place.

    r must equal z - X @ beta on entry.  a holds the coordinate curvatures
    n^-1 sum_i w_i X_ij^2.  Runs full sweeps, and between full sweeps
    restricts to the currently nonzero coordinates; terminates once a full
    sweep moves no coordinate by more than tol.  Returns the number of sweeps
    performed; history (if non-empty) records the subproblem objective after
    every sweep.
    """
    n, p = X.shape
    trace = history.shape[0] > 0
    sweeps = 0
    full = True
    while sweeps < max_sweeps:
        maxd = 0.0
        for j in range(p):
            if not full and beta[j] == 0.0:
                continue
            aj = a[j]
            if aj <= 0.0:
                continue
            col = X[:, j]
            cj = 0.0
            for i in range(n):
                cj += w[i] * col[i] * r[i]
            cj = cj / n + aj * beta[j]
            if pen[j] > 0.0:
                t = abs(cj) - pen[j]
                if t <= 0.0:
                    new = 0.0
                else:
                    new = t / aj if cj > 0.0 else -t / aj
            else:
                new = cj / aj
            d = new - beta[j]
            if d != 0.0:
                beta[j] = new
                for i in range(n):
                    r[i] -= d * col[i]
                ad = abs(d)
                if ad > maxd:
                    maxd = ad
        if trace:
            obj = 0.0
            for i in range(n):
                obj += 0.5 * w[i] * r[i] * r[i]
            obj /= n
            for j in range(p):
                obj += pen[j] * abs(beta[j])
            history[sweeps] = obj
        sweeps += 1
        if maxd < tol:
            if full:
                break
            full = True  # active set stabilized: confirm with a full sweep
        else:
            full = False
    return sweeps


@njit(cache=True)
def gram_lasso_cd(G, b, pen, x, max_sweeps, tol):
    """Cyclic CD for min_x x'Gx - 2b'x + sum_j pen_j |x_j|; x updated in place."""
    p = G.shape[0]
    Gx = G @ x
    sweeps = 0
    while sweeps < max_sweeps:
        maxd = 0.0
        for j in range(p):
            gjj = G[j, j]
            if gjj <= 0.0:
                continue
            cj = b[j] - Gx[j] + gjj * x[j]
            if pen[j] > 0.0:
                t = abs(cj) - 0.5 * pen[j]
                if t <= 0.0:
                    new = 0.0
                else:
                    new = t / gjj if cj > 0.0 else -t / gjj
            else:
                new = cj / gjj
            d = new - x[j]
            if d != 0.0:
                x[j] = new
                for k in range(p):
                    Gx[k] += G[k, j] * d
                if abs(d) > maxd:
                    maxd = abs(d)
        sweeps += 1
        if maxd < tol:
            break
    return sweeps


@njit(cache=True)
def shir_sweep(H, g, w, lam, lam_g, mu, A, U, mm_tol, mm_max):
    """One full block-coordinate sweep over columns j = 0..p-1.

    For each j: exact soft-threshold update of mu_j (threshold lam/2 on the
    partial-residual scale, intercept unpenalized), then the alpha_j block by
    majorize-minimize: gradient step with majorizing constant D = max_m of
    the diagonal curvature, projection onto the sum-to-zero hyperplane, group
    soft-threshold at lam*lam_g/(2D).  U[m] must equal H[m] @ (mu + A[m]) on
    entry and is maintained in place.  Returns the objective after the sweep.
    """
    M, p = g.shape
    v = np.empty(M)
    a_cur = np.empty(M)
    t_loc = np.empty(M)
    for j in range(p):
        aj = 0.0
        bj = 0.0
        dmax = 0.0
        for m in range(M):
            d = w[m] * H[m, j, j]
            aj += d
            if d > dmax:
                dmax = d
            bj += w[m] * (g[m, j] - U[m, j])
        if aj > 0.0:
            bj += aj * mu[j]
            if j == 0 or lam == 0.0:
                new = bj / aj
            else:
                t = abs(bj) - 0.5 * lam
                if t <= 0.0:
                    new = 0.0
                else:
                    new = t / aj if bj > 0.0 else -t / aj
            d = new - mu[j]
            if d != 0.0:
                mu[j] = new
                for m in range(M):
                    for k in range(p):
                        U[m, k] += H[m, k, j] * d
        if M < 2 or dmax <= 0.0:
            continue
        tau = 0.0 if j == 0 else 0.5 * lam * lam_g / dmax
        for m in range(M):
            a_cur[m] = A[m, j]
            t_loc[m] = U[m, j]
        it = 0
        while it < mm_max:
            vbar = 0.0
            for m in range(M):
                v[m] = a_cur[m] - w[m] * (t_loc[m] - g[m, j]) / dmax
                vbar += v[m]
            vbar /= M
            nv = 0.0
            for m in range(M):
                v[m] -= vbar
                nv += v[m] * v[m]
            nv = np.sqrt(nv)
            if tau == 0.0:
                scale = 1.0
            elif nv > tau:
                scale = 1.0 - tau / nv
            else:
                scale = 0.0
            maxd = 0.0
            for m in range(M):
                newv = v[m] * scale
                d = newv - a_cur[m]
                if abs(d) > maxd:
                    maxd = abs(d)
                t_loc[m] += H[m, j, j] * d
                a_cur[m] = newv
            it += 1
            if maxd < mm_tol:
                break
        for m in range(M):
            net = a_cur[m] - A[m, j]
            if net != 0.0:
                A[m, j] = a_cur[m]
                for k in range(p):
                    U[m, k] += H[m, k, j] * net
    # objective at the end of the sweep
    obj = 0.0
    for m in range(M):
        for k in range(p):
            bk = mu[k] + A[m, k]
            obj += w[m] * bk * (U[m, k] - 2.0 * g[m, k])
    pen = 0.0
    for j in range(1, p):
        pen += abs(mu[j])
        nrm = 0.0
        for m in range(M):
            nrm += A[m, j] * A[m, j]
        pen += lam_g * np.sqrt(nrm)
    return obj + lam * pen
