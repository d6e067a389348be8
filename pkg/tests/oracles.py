"""Independent reference computations used by the tests.

Nothing here calls the package's estimation code: each oracle is written
directly from the model definitions with plain loops.
"""

import itertools
import math

import numpy as np

from gformula import Panel


def sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def naive_loglik_bernoulli(beta, X, y):
    # product of per-row probabilities, then log (small n only)
    prod = 1.0
    for row, yi in zip(X, y):
        p = sigmoid(float(np.dot(row, beta)))
        prod *= p if yi == 1 else 1.0 - p
    return math.log(prod)


def naive_loglik_gaussian(beta, sigma, X, y):
    total = 0.0
    for row, yi in zip(X, y):
        mu = float(np.dot(row, beta))
        dens = math.exp(-((yi - mu) ** 2) / (2 * sigma**2)) / math.sqrt(2 * math.pi * sigma**2)
        total += math.log(dens)
    return total


def batch_means_se(x, n_batches=40):
    """Monte Carlo standard error of the mean of a correlated sequence."""
    x = np.asarray(x, dtype=float)
    m = len(x) // n_batches
    means = x[: m * n_batches].reshape(n_batches, m).mean(axis=1)
    return float(np.std(means, ddof=1) / math.sqrt(n_batches))


# --- random longitudinal panels --------------------------------------------


def random_panel(rng, n, k, covs=("l1", "l2"), survival=True):
    """All-binary long panel; subjects leave after their first event when ``survival``."""
    ids, time, ys, xs = [], [], [], []
    cv = {c: [] for c in covs}
    for i in range(n):
        for t in range(k + 1):
            ids.append(i)
            time.append(t)
            xs.append(float(rng.random() < 0.5))
            for c in covs:
                cv[c].append(float(rng.random() < 0.4))
            y = float(rng.random() < 0.2)
            ys.append(y)
            if survival and y == 1.0:
                break
    return Panel.from_columns(ids, time, ys, xs, cv, {"y", "x", *covs})


# --- g-formula by explicit path recursion -----------------------------------
# model (fixed for these oracles):
#   l1(t) ~ 1 + cumlag(x) + cumlag(l1)
#   l2(t) ~ 1 + l1 + cumlag(x)
#   y(t)  ~ 1 + t + x + cumlag(x) + l1 + l2          (survival)

TV_OUTCOME = "1 + t + x + cumlag(x) + l1 + l2"
TV_L1 = "1 + cumlag(x) + cumlag(l1)"
TV_L2 = "1 + l1 + cumlag(x)"


def recursion_gformula(beta, eta1, eta2, baseline, k, g):
    """Cumulative incidence at t = 0..k averaged over ``baseline`` (list of (l1, l2))."""
    out = np.zeros(k + 1)
    for l1_0, l2_0 in baseline:
        out += _subject_risk(beta, eta1, eta2, l1_0, l2_0, k, g)
    return out / len(baseline)


def _subject_risk(beta, eta1, eta2, l1_0, l2_0, k, g):
    risk = np.zeros(k + 1)

    def hazard(t, l1, l2):
        return sigmoid(beta[0] + beta[1] * t + beta[2] * g + beta[3] * g * t + beta[4] * l1 + beta[5] * l2)

    # enumerate every covariate path (l1(1..k), l2(1..k))
    for path in itertools.product((0, 1), repeat=2 * k):
        l1s = [l1_0] + list(path[0::2])
        l2s = [l2_0] + list(path[1::2])
        prob = 1.0
        cum_l1 = l1_0
        for t in range(1, k + 1):
            p1 = sigmoid(eta1[0] + eta1[1] * g * t + eta1[2] * cum_l1)
            prob *= p1 if l1s[t] else 1 - p1
            p2 = sigmoid(eta2[0] + eta2[1] * l1s[t] + eta2[2] * g * t)
            prob *= p2 if l2s[t] else 1 - p2
            cum_l1 += l1s[t]
        surv = 1.0
        cum = 0.0
        for t in range(k + 1):
            h = hazard(t, l1s[t], l2s[t])
            cum += surv * h
            surv *= 1 - h
            risk[t] += prob * cum
    return risk


def two_branch(beta, eta, g):
    """E[Y(1)] under static g for the two-period structure.

    L(1) ~ expit(eta0 + eta1 X(0)); Y ~ expit(b0 + b1 X(0) + b2 X(1) + b3 L(1)).
    """
    p_l = sigmoid(eta[0] + eta[1] * g)
    total = 0.0
    for l1, pl in ((0, 1 - p_l), (1, p_l)):
        total += pl * sigmoid(beta[0] + beta[1] * g + beta[2] * g + beta[3] * l1)
    return total


def count_standardization(x, l, y, g):
    """sum_l P(Y=1 | X=g, L=l) P(L=l) from raw counts."""
    x, l, y = map(np.asarray, (x, l, y))
    total = 0.0
    for lv in (0, 1):
        cell = (x == g) & (l == lv)
        total += y[cell].mean() * np.mean(l == lv)
    return total


# --- grid posterior -----------------------------------------------------------


def grid_posterior_marginals(X, y, prior_means, prior_vars, half_width=6.0, n=801):
    """Marginal CDFs of a 2-coefficient logistic posterior on a fine grid around its mode."""
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    # rough mode by Newton
    b = np.zeros(2)
    P = np.diag(1.0 / np.asarray(prior_vars))
    m = np.asarray(prior_means, float)
    for _ in range(100):
        mu = 1 / (1 + np.exp(-X @ b))
        grad = X.T @ (y - mu) - P @ (b - m)
        H = (X.T * (mu * (1 - mu))) @ X + P
        b = b + np.linalg.solve(H, grad)
    sd = np.sqrt(np.diag(np.linalg.inv(H)))
    axes = [np.linspace(b[j] - half_width * sd[j], b[j] + half_width * sd[j], n) for j in range(2)]
    B0, B1 = np.meshgrid(*axes, indexing="ij")
    eta = B0[..., None] * X[:, 0] + B1[..., None] * X[:, 1]
    ll = np.sum(y * eta - np.logaddexp(0, eta), axis=-1)
    lp = ll - 0.5 * ((B0 - m[0]) ** 2 / prior_vars[0] + (B1 - m[1]) ** 2 / prior_vars[1])
    dens = np.exp(lp - lp.max())
    dens /= dens.sum()
    cdfs = [np.cumsum(dens.sum(axis=1)), np.cumsum(dens.sum(axis=0))]
    return axes, cdfs


def grid_quantile(axis, cdf, q):
    return float(np.interp(q, cdf, axis))
