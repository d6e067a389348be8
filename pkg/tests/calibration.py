"""Sampler calibration checks shared by the unit and acceptance suites.

Each check returns rows ``(label, estimate, target, mc_se)``; a row passes when
``|estimate - target| <= 3 * mc_se``.
"""

import math

import numpy as np

from gformula import ModelSpec, Normal, OutcomeModel, Panel, PriorSpec, SamplerConfig, TermList, sample_chain
from gformula.core import GAUSSIAN, Fixed

from oracles import batch_means_se, grid_posterior_marginals, grid_quantile


def _panel_with_z(y, z):
    n = len(y)
    return Panel.from_columns(np.arange(n), np.zeros(n), y, np.zeros(n), {"z": z}, {"x"})


def conjugate_normal_check(seed=0, n=40, sigma=1.0, iterations=40_000):
    """Gaussian outcome, known sigma, Normal priors: posterior is Normal in closed form."""
    rng = np.random.default_rng(seed)
    z = rng.normal(size=n)
    y = 0.5 + 1.2 * z + sigma * rng.normal(size=n)
    m0 = np.array([0.2, -0.1])
    v0 = np.array([2.0, 3.0])
    spec = ModelSpec(OutcomeModel(TermList.parse("1 + z"), GAUSSIAN))
    priors = PriorSpec({"y": (Normal(m0[0], v0[0]), Normal(m0[1], v0[1]))}, Fixed(sigma))
    chain = sample_chain(SamplerConfig(iterations, 2000, seed=seed + 1), spec, priors, _panel_with_z(y, z))
    X = np.column_stack([np.ones(n), z])
    prec = X.T @ X / sigma**2 + np.diag(1 / v0)
    cov = np.linalg.inv(prec)
    mu = cov @ (X.T @ y / sigma**2 + m0 / v0)
    rows = []
    for j, name in enumerate(("intercept", "slope")):
        d = chain.draws[:, j]
        rows.append((f"{name} mean", float(d.mean()), float(mu[j]), batch_means_se(d)))
        sd = float(d.std(ddof=1))
        # delta method: se(sd) ~ se(var) / (2 sd)
        var_se = batch_means_se((d - d.mean()) ** 2)
        rows.append((f"{name} sd", sd, float(math.sqrt(cov[j, j])), var_se / (2 * sd)))
    return rows


def logistic_grid_check(seed=0, n=30, iterations=40_000):
    """Two-coefficient logistic posterior with N(0,3) priors against fine-grid quantiles.

    Compared on the CDF scale: the chain's fraction of draws below the grid's
    q-quantile should be q, with a batch-means standard error.
    """
    rng = np.random.default_rng(seed)
    z = rng.normal(size=n)
    y = (rng.random(n) < 1 / (1 + np.exp(-(-0.3 + 1.1 * z)))).astype(float)
    spec = ModelSpec(OutcomeModel(TermList.parse("1 + z")))
    priors = PriorSpec({"y": (Normal(0.0, 3.0), Normal(0.0, 3.0))})
    chain = sample_chain(SamplerConfig(iterations, 2000, seed=seed + 1), spec, priors, _panel_with_z(y, z))
    X = np.column_stack([np.ones(n), z])
    axes, cdfs = grid_posterior_marginals(X, y, [0.0, 0.0], [3.0, 3.0])
    rows = []
    for j, name in enumerate(("intercept", "slope")):
        for q in (0.1, 0.5, 0.9):
            xq = grid_quantile(axes[j], cdfs[j], q)
            ind = (chain.draws[:, j] <= xq).astype(float)
            rows.append((f"{name} P(<= q{int(q * 100)})", float(ind.mean()), q, batch_means_se(ind)))
    return rows


def within(rows, k=3.0):
    return all(abs(est - tgt) <= k * se for _, est, tgt, se in rows)
