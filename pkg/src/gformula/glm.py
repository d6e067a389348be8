"""Log-likelihoods, scores and maximum-likelihood fits for logistic and linear models."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit as _expit
from scipy.special import logit

from . import _kernels
from .core import BERNOULLI, GAUSSIAN

CLAMP = 15.0
RIDGE = 1e-8
TOL = 1e-8
MAX_ITER = 50

__all__ = [
    "FitResult", "expit", "logit", "loglik_bernoulli", "loglik_gaussian",
    "score_bernoulli", "score_gaussian", "fit_mle", "fit_mle_batch",
]


@dataclass(frozen=True)
class FitResult:
    coefficients: np.ndarray
    converged: bool
    iterations: int
    log_likelihood: float
    divergence_flag: bool = False
    sigma: float | None = None
    history: tuple = field(default=(), repr=False)


def expit(z):
    """Inverse logit, 1 / (1 + exp(-z))."""
    return _expit(z)


def _check_dims(beta, design, y):
    design = np.asarray(design, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if design.ndim != 2 or design.shape[1] != beta.shape[0] or design.shape[0] != y.shape[0]:
        raise ValueError(
            f"dimension mismatch: design {design.shape}, beta {beta.shape}, y {y.shape}"
        )
    return beta, design, y


def loglik_bernoulli(beta, design, y, weights=None) -> float:
    beta, design, y = _check_dims(beta, design, y)
    eta = design @ beta
    terms = y * eta - np.logaddexp(0.0, eta)
    if weights is not None:
        terms = terms * weights
    return float(np.sum(terms))


def score_bernoulli(beta, design, y, weights=None) -> np.ndarray:
    beta, design, y = _check_dims(beta, design, y)
    r = y - expit(design @ beta)
    if weights is not None:
        r = r * weights
    return design.T @ r


def loglik_gaussian(beta, sigma, design, y, weights=None) -> float:
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    beta, design, y = _check_dims(beta, design, y)
    r = y - design @ beta
    terms = -0.5 * math.log(2.0 * math.pi * sigma * sigma) - r * r / (2.0 * sigma * sigma)
    if weights is not None:
        terms = terms * weights
    return float(np.sum(terms))


def score_gaussian(beta, sigma, design, y, weights=None):
    """Gradient with respect to ``(beta, sigma)``."""
    beta, design, y = _check_dims(beta, design, y)
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=np.float64)
    r = y - design @ beta
    g_beta = design.T @ (w * r) / sigma**2
    g_sigma = float(np.sum(w * (-1.0 / sigma + r * r / sigma**3)))
    return g_beta, g_sigma


def fit_mle(design, y, family: str = BERNOULLI, weights=None) -> FitResult:
    """Maximum-likelihood fit of one model.

    Bernoulli fits use IRLS with step halving until the largest score component
    is below 1e-8 or 50 iterations pass. Coefficients are clamped to [-15, 15];
    hitting the clamp (separation, constant outcome) sets ``divergence_flag``.
    Gaussian fits are closed-form least squares with the MLE residual variance.
    """
    design = np.asarray(design, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if design.shape[0] == 0:
        raise ValueError("cannot fit a model to empty data")
    w = np.ones(design.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    return fit_mle_batch(design, y, family, w[None, :])[0]


def fit_mle_batch(design, y, family, weights) -> list:
    """Fit the same model once per row of a frequency-weight matrix.

    Used by the bootstrap: a resample with replacement is exactly a fit with
    integer subject counts as weights.
    """
    design = np.asarray(design, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    W = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    if design.shape[0] == 0:
        raise ValueError("cannot fit a model to empty data")
    if family == BERNOULLI:
        coef, conv, iters, ll, flag, hist = _kernels.irls_logistic_batch(
            design, y, W, MAX_ITER, TOL, CLAMP, RIDGE
        )
        out = []
        for s in range(W.shape[0]):
            h = hist[s, : iters[s] + 1]
            out.append(FitResult(coef[s], bool(conv[s]), int(iters[s]), float(ll[s]),
                                 bool(flag[s]), None, tuple(h)))
        return out
    if family == GAUSSIAN:
        return [_fit_gaussian(design, y, w) for w in W]
    raise ValueError(f"unknown family {family!r}")


def _fit_gaussian(design, y, w) -> FitResult:
    p = design.shape[1]
    xtw = design.T * w
    H = xtw @ design + RIDGE * np.eye(p)
    beta = np.linalg.solve(H, xtw @ y)
    r = y - design @ beta
    total = float(np.sum(w))
    sigma2 = float(np.sum(w * r * r)) / total if total > 0 else 0.0
    flag = not sigma2 > 0
    sigma = math.sqrt(sigma2) if sigma2 > 0 else 1e-8
    ll = loglik_gaussian(beta, sigma, design, y, w)
    return FitResult(beta, True, 1, ll, flag, sigma, (ll,))
