"""Hot numeric loops: batched logistic IRLS and the random-walk Metropolis chain.

Each kernel has a numba implementation and a pure-numpy implementation with the
same signature. The numba path is used when numba imports and the environment
variable ``GFORMULA_NUMBA`` is not set to ``0``. The two paths agree to floating
point rounding, not bit-for-bit; each is deterministic on its own.
"""

from __future__ import annotations

import math
import os

import numpy as np

FAMILY_BERNOULLI = 0
FAMILY_GAUSSIAN = 1

PRIOR_FLAT = 0
PRIOR_NORMAL = 1
PRIOR_LAPLACE = 2

_LOG_2PI = math.log(2.0 * math.pi)

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False


def numba_enabled() -> bool:
    return _HAVE_NUMBA and os.environ.get("GFORMULA_NUMBA", "1").strip() != "0"


# ---------------------------------------------------------------------------
# pure numpy implementations
# ---------------------------------------------------------------------------


def _log1pexp_np(eta):
    return np.logaddexp(0.0, eta)


def _bern_ll_rows_np(X, y, W, B):
    # B: (S, p), W: (S, n) -> (S,)
    eta = B @ X.T
    return np.sum(W * (y * eta - _log1pexp_np(eta)), axis=1)


def irls_logistic_batch_np(X, y, W, max_iter, tol, clamp, ridge):
    S, n = W.shape
    p = X.shape[1]
    beta = np.zeros((S, p))
    ll = _bern_ll_rows_np(X, y, W, beta)
    history = np.full((S, max_iter + 1), np.nan)
    history[:, 0] = ll
    active = np.ones(S, dtype=bool)
    converged = np.zeros(S, dtype=bool)
    flagged = np.zeros(S, dtype=bool)
    iters = np.zeros(S, dtype=np.int64)
    eye = np.eye(p)
    for it in range(max_iter + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        b = beta[idx]
        w = W[idx]
        eta = b @ X.T
        mu = 1.0 / (1.0 + np.exp(-eta))
        score = (w * (y - mu)) @ X
        done = np.max(np.abs(score), axis=1) < tol
        converged[idx[done]] = True
        active[idx[done]] = False
        if it == max_iter:
            break
        keep = ~done
        idx, b, w, mu, score = idx[keep], b[keep], w[keep], mu[keep], score[keep]
        if idx.size == 0:
            break
        wt = w * mu * (1.0 - mu)
        H = np.einsum("sn,ni,nj->sij", wt, X, X) + ridge * eye
        step = np.linalg.solve(H, score[:, :, None])[:, :, 0]
        cur = ll[idx]
        accepted = np.zeros(idx.size, dtype=bool)
        new_b = b.copy()
        new_ll = cur.copy()
        t = 1.0
        for _ in range(31):
            pend = ~accepted
            if not pend.any():
                break
            cand = np.clip(b[pend] + t * step[pend], -clamp, clamp)
            cll = _bern_ll_rows_np(X, y, w[pend], cand)
            ok = cll >= cur[pend] - 1e-11
            sel = np.flatnonzero(pend)[ok]
            new_b[sel] = cand[ok]
            new_ll[sel] = cll[ok]
            accepted[sel] = True
            t *= 0.5
        stalled = ~accepted
        active[idx[stalled]] = False
        mv = idx[accepted]
        beta[mv] = new_b[accepted]
        ll[mv] = new_ll[accepted]
        flagged[mv] |= np.any(np.abs(new_b[accepted]) >= clamp, axis=1)
        iters[mv] += 1
        history[mv, it + 1] = ll[mv]
    return beta, converged, iters, ll, flagged, history


def _block_loglik_np(X, y, w, family, theta):
    if family == FAMILY_BERNOULLI:
        eta = X @ theta
        return float(np.sum(w * (y * eta - _log1pexp_np(eta))))
    p = X.shape[1]
    log_sigma = theta[p]
    sigma2 = math.exp(2.0 * log_sigma)
    r = y - X @ theta[:p]
    return float(np.sum(w * (-0.5 * _LOG_2PI - log_sigma - r * r / (2.0 * sigma2))))


def _log_prior_np(theta, kind, mean, param):
    out = 0.0
    for j in range(theta.shape[0]):
        if kind[j] == PRIOR_NORMAL:
            d = theta[j] - mean[j]
            out += -0.5 * math.log(2.0 * math.pi * param[j]) - d * d / (2.0 * param[j])
        elif kind[j] == PRIOR_LAPLACE:
            out += math.log(param[j] / 2.0) - param[j] * abs(theta[j] - mean[j])
    return out


def rwm_chain_np(X, y, w, family, kind, mean, param, theta0, chol, scale0,
                 n_burn, n_keep, thin, adapt, target, window, normals, uniforms):
    d = theta0.shape[0]
    n_out = n_keep // thin
    draws = np.empty((n_out, d))
    trace = np.empty(n_out)
    theta = theta0.copy()
    lp = _block_loglik_np(X, y, w, family, theta) + _log_prior_np(theta, kind, mean, param)
    scale = scale0
    acc_window = 0
    acc_burn = 0
    acc_keep = 0
    k = 0
    for it in range(n_burn + n_keep):
        prop = theta + scale * (chol @ normals[it])
        lp_prop = _block_loglik_np(X, y, w, family, prop) + _log_prior_np(prop, kind, mean, param)
        if math.log(uniforms[it]) < lp_prop - lp:
            theta = prop
            lp = lp_prop
            if it < n_burn:
                acc_burn += 1
                acc_window += 1
            else:
                acc_keep += 1
        if it < n_burn:
            if adapt and (it + 1) % window == 0:
                rate = acc_window / window
                if rate > target + 0.1:
                    scale *= 1.1
                elif rate < target - 0.1:
                    scale /= 1.1
                acc_window = 0
        elif (it - n_burn + 1) % thin == 0 and k < n_out:
            draws[k] = theta
            trace[k] = lp
            k += 1
    return draws, trace, acc_burn, acc_keep, scale


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @numba.njit(cache=True)
    def _log1pexp_nb(z):
        if z > 0.0:
            return z + math.log1p(math.exp(-z))
        return math.log1p(math.exp(z))

    @numba.njit(cache=True)
    def _bern_ll_nb(X, y, w, beta):
        n, p = X.shape
        total = 0.0
        for i in range(n):
            if w[i] == 0.0:
                continue
            eta = 0.0
            for j in range(p):
                eta += X[i, j] * beta[j]
            total += w[i] * (y[i] * eta - _log1pexp_nb(eta))
        return total

    @numba.njit(cache=True)
    def _irls_one_nb(X, y, w, max_iter, tol, clamp, ridge, history):
        n, p = X.shape
        beta = np.zeros(p)
        ll = _bern_ll_nb(X, y, w, beta)
        history[0] = ll
        converged = False
        flagged = False
        iters = 0
        score = np.empty(p)
        H = np.empty((p, p))
        for it in range(max_iter + 1):
            score[:] = 0.0
            H[:, :] = 0.0
            for i in range(n):
                if w[i] == 0.0:
                    continue
                eta = 0.0
                for j in range(p):
                    eta += X[i, j] * beta[j]
                mu = 1.0 / (1.0 + math.exp(-eta))
                r = w[i] * (y[i] - mu)
                v = w[i] * mu * (1.0 - mu)
                for j in range(p):
                    score[j] += r * X[i, j]
                    xv = v * X[i, j]
                    for k in range(j + 1):
                        H[j, k] += xv * X[i, k]
            smax = 0.0
            for j in range(p):
                if abs(score[j]) > smax:
                    smax = abs(score[j])
            if smax < tol:
                converged = True
                break
            if it == max_iter:
                break
            for j in range(p):
                for k in range(j):
                    H[k, j] = H[j, k]
                H[j, j] += ridge
            step = np.linalg.solve(H, score)
            t = 1.0
            moved = False
            cand = np.empty(p)
            for _ in range(31):
                for j in range(p):
                    c = beta[j] + t * step[j]
                    if c > clamp:
                        c = clamp
                    elif c < -clamp:
                        c = -clamp
                    cand[j] = c
                cll = _bern_ll_nb(X, y, w, cand)
                if cll >= ll - 1e-11:
                    moved = True
                    break
                t *= 0.5
            if not moved:
                break
            for j in range(p):
                beta[j] = cand[j]
                if abs(cand[j]) >= clamp:
                    flagged = True
            ll = cll
            iters += 1
            history[it + 1] = ll
        return beta, converged, iters, ll, flagged

    @numba.njit(cache=True)
    def irls_logistic_batch_nb(X, y, W, max_iter, tol, clamp, ridge):
        S = W.shape[0]
        p = X.shape[1]
        coef = np.empty((S, p))
        converged = np.zeros(S, dtype=np.bool_)
        flagged = np.zeros(S, dtype=np.bool_)
        iters = np.zeros(S, dtype=np.int64)
        ll = np.empty(S)
        history = np.full((S, max_iter + 1), np.nan)
        for s in range(S):
            b, c, k, l, f = _irls_one_nb(X, y, W[s], max_iter, tol, clamp, ridge, history[s])
            coef[s] = b
            converged[s] = c
            iters[s] = k
            ll[s] = l
            flagged[s] = f
        return coef, converged, iters, ll, flagged, history

    @numba.njit(cache=True)
    def _block_loglik_nb(X, y, w, family, theta):
        if family == 0:
            return _bern_ll_nb(X, y, w, theta)
        n, p = X.shape
        log_sigma = theta[p]
        sigma2 = math.exp(2.0 * log_sigma)
        total = 0.0
        for i in range(n):
            mu = 0.0
            for j in range(p):
                mu += X[i, j] * theta[j]
            r = y[i] - mu
            total += w[i] * (-0.5 * _LOG_2PI - log_sigma - r * r / (2.0 * sigma2))
        return total

    @numba.njit(cache=True)
    def _log_prior_nb(theta, kind, mean, param):
        out = 0.0
        for j in range(theta.shape[0]):
            if kind[j] == 1:
                d = theta[j] - mean[j]
                out += -0.5 * math.log(2.0 * math.pi * param[j]) - d * d / (2.0 * param[j])
            elif kind[j] == 2:
                out += math.log(param[j] / 2.0) - param[j] * abs(theta[j] - mean[j])
        return out

    @numba.njit(cache=True)
    def rwm_chain_nb(X, y, w, family, kind, mean, param, theta0, chol, scale0,
                     n_burn, n_keep, thin, adapt, target, window, normals, uniforms):
        d = theta0.shape[0]
        n_out = n_keep // thin
        draws = np.empty((n_out, d))
        trace = np.empty(n_out)
        theta = theta0.copy()
        prop = np.empty(d)
        lp = _block_loglik_nb(X, y, w, family, theta) + _log_prior_nb(theta, kind, mean, param)
        scale = scale0
        acc_window = 0
        acc_burn = 0
        acc_keep = 0
        k = 0
        for it in range(n_burn + n_keep):
            for a in range(d):
                z = 0.0
                for b in range(a + 1):
                    z += chol[a, b] * normals[it, b]
                prop[a] = theta[a] + scale * z
            lp_prop = _block_loglik_nb(X, y, w, family, prop) + _log_prior_nb(prop, kind, mean, param)
            if math.log(uniforms[it]) < lp_prop - lp:
                theta[:] = prop
                lp = lp_prop
                if it < n_burn:
                    acc_burn += 1
                    acc_window += 1
                else:
                    acc_keep += 1
            if it < n_burn:
                if adapt and (it + 1) % window == 0:
                    rate = acc_window / window
                    if rate > target + 0.1:
                        scale *= 1.1
                    elif rate < target - 0.1:
                        scale /= 1.1
                    acc_window = 0
            elif (it - n_burn + 1) % thin == 0 and k < n_out:
                draws[k] = theta
                trace[k] = lp
                k += 1
        return draws, trace, acc_burn, acc_keep, scale


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def backend() -> str:
    return "numba" if numba_enabled() else "numpy"


def irls_logistic_batch(X, y, W, max_iter=50, tol=1e-8, clamp=15.0, ridge=1e-8):
    """Fit one logistic regression per row of the frequency-weight matrix ``W``.

    Returns ``(coef, converged, iterations, loglik, flagged, history)``.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    W = np.ascontiguousarray(np.atleast_2d(W), dtype=np.float64)
    if numba_enabled():
        return irls_logistic_batch_nb(X, y, W, int(max_iter), float(tol), float(clamp), float(ridge))
    return irls_logistic_batch_np(X, y, W, int(max_iter), float(tol), float(clamp), float(ridge))


def rwm_chain(X, y, w, family, kind, mean, param, theta0, chol, scale0,
              n_burn, n_keep, thin, adapt, target, window, normals, uniforms):
    args = (
        np.ascontiguousarray(X, dtype=np.float64),
        np.ascontiguousarray(y, dtype=np.float64),
        np.ascontiguousarray(w, dtype=np.float64),
        int(family),
        np.ascontiguousarray(kind, dtype=np.int64),
        np.ascontiguousarray(mean, dtype=np.float64),
        np.ascontiguousarray(param, dtype=np.float64),
        np.ascontiguousarray(theta0, dtype=np.float64),
        np.ascontiguousarray(chol, dtype=np.float64),
        float(scale0),
        int(n_burn),
        int(n_keep),
        int(thin),
        bool(adapt),
        float(target),
        int(window),
        np.ascontiguousarray(normals, dtype=np.float64),
        np.ascontiguousarray(uniforms, dtype=np.float64),
    )
    if numba_enabled():
        return rwm_chain_nb(*args)
    return rwm_chain_np(*args)
