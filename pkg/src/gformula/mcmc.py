"""Blockwise adaptive random-walk Metropolis over the outcome and covariate models.

The likelihood factors into one term per model, and priors are independent
across models, so the joint posterior is a product over blocks. Each block is
updated once per iteration with its own proposal scale and random stream.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .core import (
    BERNOULLI, GAUSSIAN, DoubleExponential, Fixed, Flat, ModelSpec, Normal, Panel, PriorSpec,
    SpecError, block_items, pooled_design,
)
from .glm import CLAMP, expit, fit_mle, loglik_bernoulli, loglik_gaussian

ADAPT_WINDOW = 50


@dataclass(frozen=True)
class SamplerConfig:
    """Settings for one chain.

    ``initial_step_scale`` multiplies a proposal already shaped by the inverse
    curvature at the start point; ``None`` means 2.38/sqrt(block size).
    """

    iterations: int = 2000
    burn_in: int = 500
    thin: int = 1
    seed: int = 0
    initial_step_scale: float | None = None
    adapt: bool = True
    target_acceptance: float = 0.30
    chain_index: int = 0

    def __post_init__(self):
        if self.iterations < 1 or self.burn_in < 1:
            raise ValueError("iterations and burn_in must be at least 1")
        if self.thin < 1:
            raise ValueError("thin must be at least 1")
        if not 0.0 < self.target_acceptance < 1.0:
            raise ValueError("target_acceptance must lie in (0, 1)")
        if self.initial_step_scale is not None and not self.initial_step_scale > 0:
            raise ValueError("initial_step_scale must be positive")


@dataclass
class ChainOutput:
    draws: np.ndarray
    acceptance_rate: dict
    log_posterior: np.ndarray
    param_names: list
    block_slices: dict
    step_scales: dict = field(default_factory=dict)

    def block(self, key: str) -> np.ndarray:
        return self.draws[:, self.block_slices[key]]


@dataclass
class Block:
    """Data and priors for one model's likelihood factor."""

    key: str
    family: str
    design: np.ndarray
    response: np.ndarray
    weights: np.ndarray
    priors: tuple
    scale_prior: object
    labels: list

    @property
    def n_params(self) -> int:
        return self.design.shape[1] + (1 if self.family == GAUSSIAN else 0)

    def prior_arrays(self):
        entries = list(self.priors)
        if self.family == GAUSSIAN:
            entries.append(self.scale_prior)
        kind = np.empty(len(entries), dtype=np.int64)
        mean = np.zeros(len(entries))
        param = np.ones(len(entries))
        for j, e in enumerate(entries):
            if isinstance(e, Normal):
                kind[j], mean[j], param[j] = _kernels.PRIOR_NORMAL, e.mean, e.variance
            elif isinstance(e, DoubleExponential):
                kind[j], mean[j], param[j] = _kernels.PRIOR_LAPLACE, e.mean, e.rate
            elif isinstance(e, (Flat, Fixed)):
                kind[j] = _kernels.PRIOR_FLAT
            else:
                raise SpecError(f"unsupported prior {e!r}")
        return kind, mean, param

    def loglik(self, theta) -> float:
        theta = np.asarray(theta, dtype=np.float64)
        p = self.design.shape[1]
        if self.family == BERNOULLI:
            return loglik_bernoulli(theta, self.design, self.response, self.weights)
        return loglik_gaussian(theta[:p], math.exp(theta[p]), self.design, self.response, self.weights)

    def log_prior(self, theta) -> float:
        entries = list(self.priors) + ([self.scale_prior] if self.family == GAUSSIAN else [])
        total = 0.0
        for v, e in zip(np.asarray(theta, dtype=np.float64), entries):
            lp = prior_logdensity(float(v), e)
            if not math.isfinite(lp):
                raise ValueError(f"non-finite prior density in block {self.key!r}")
            total += lp
        return total


def prior_logdensity(value: float, prior) -> float:
    """Exact log-density of one prior entry; flat priors contribute 0."""
    if isinstance(prior, Normal):
        d = value - prior.mean
        return -0.5 * math.log(2.0 * math.pi * prior.variance) - d * d / (2.0 * prior.variance)
    if isinstance(prior, DoubleExponential):
        return math.log(prior.rate / 2.0) - prior.rate * abs(value - prior.mean)
    if isinstance(prior, Flat):
        return 0.0
    if isinstance(prior, Fixed):
        return 0.0 if value == math.log(prior.value) else -math.inf
    raise SpecError(f"unsupported prior {prior!r}")


def build_blocks(spec: ModelSpec, panel: Panel, priors: PriorSpec | None = None, row_weights=None) -> list:
    """One :class:`Block` per model, in sampling order (outcome first).

    The exposure model never appears: its likelihood factor does not involve
    the outcome or covariate parameters.
    """
    priors = priors or PriorSpec.flat()
    k = panel.horizon
    blocks = []
    for key, model in block_items(spec):
        if key == "y":
            times = spec.outcome_times(k)
        else:
            times = spec.covariate_times(model, k)
        rows, X, resp = pooled_design(panel, model.terms, times, key)
        if rows.size == 0:
            raise ValueError(f"no rows to fit the model for {key!r}")
        w = np.ones(rows.size) if row_weights is None else np.asarray(row_weights, dtype=np.float64)[rows]
        blocks.append(Block(
            key, model.family, X, resp, w,
            priors.for_block(key, X.shape[1]), priors.scale,
            [f"{key}:{lab}" for lab in model.terms.labels()] + (["%s:log_sigma" % key] if model.family == GAUSSIAN else []),
        ))
    return blocks


def log_posterior(theta, spec: ModelSpec, priors: PriorSpec, panel: Panel, blocks=None) -> float:
    """Sum over model blocks of log-likelihood plus log-prior.

    ``theta`` is the concatenation of the block parameter vectors in
    :func:`build_blocks` order; Gaussian blocks end with log(sigma).
    """
    blocks = blocks if blocks is not None else build_blocks(spec, panel, priors)
    theta = np.asarray(theta, dtype=np.float64)
    total_len = sum(b.n_params for b in blocks)
    if theta.ndim != 1 or theta.shape[0] != total_len:
        raise ValueError(f"theta has {theta.shape} entries, blocks need {total_len}")
    out = 0.0
    start = 0
    for b in blocks:
        part = theta[start:start + b.n_params]
        out += b.loglik(part) + b.log_prior(part)
        start += b.n_params
    return out


def _prior_precision(block: Block) -> np.ndarray:
    prec = np.zeros(block.n_params)
    for j, e in enumerate(block.priors):
        if isinstance(e, Normal):
            prec[j] = 1.0 / e.variance
        elif isinstance(e, DoubleExponential):
            prec[j] = e.rate * e.rate / 2.0  # variance of the Laplace prior is 2/rate^2
    return prec


def _start_and_curvature(block: Block):
    """Starting point and inverse negative Hessian of the block log-posterior there.

    Starts from the MLE when its fit is clean, zeros otherwise, then takes
    damped Newton steps on the log-posterior so the chain begins near the mode.
    """
    X, y, w = block.design, block.response, block.weights
    p = X.shape[1]
    prec = _prior_precision(block)
    fit = fit_mle(X, y, block.family, w)
    if block.family == GAUSSIAN:
        fixed = isinstance(block.scale_prior, Fixed)
        if fixed:
            sigma = block.scale_prior.value
        else:
            sigma = fit.sigma if fit.sigma and fit.sigma > 1e-6 else 1.0
        # conditional posterior mode of beta given sigma (exact for Normal/flat priors)
        H = (X.T * w) @ X / sigma**2 + np.diag(prec[:p]) + 1e-8 * np.eye(p)
        beta = np.linalg.solve(H, (X.T * w) @ y / sigma**2 + _prior_mean_pull(block, prec))
        cov = np.zeros((p + 1, p + 1))
        cov[:p, :p] = np.linalg.inv(H)
        # a zero variance for log(sigma) keeps a fixed scale where it is
        cov[p, p] = 0.0 if fixed else 1.0 / (2.0 * max(float(np.sum(w)), 1.0))
        return np.r_[beta, math.log(sigma)], cov
    beta = fit.coefficients.copy() if not fit.divergence_flag else np.zeros(p)

    def target(b):
        return block.loglik(b) + block.log_prior(b)

    cur = target(beta)
    for _ in range(50):
        mu = expit(X @ beta)
        grad = X.T @ (w * (y - mu)) - prec[:p] * beta + _prior_mean_pull(block, prec)
        H = (X.T * (w * mu * (1 - mu))) @ X + np.diag(prec[:p]) + 1e-8 * np.eye(p)
        step = np.linalg.solve(H, grad)
        t = 1.0
        moved = False
        for _ in range(30):
            cand = np.clip(beta + t * step, -CLAMP, CLAMP)
            val = target(cand)
            if val >= cur:
                moved = True
                break
            t *= 0.5
        if not moved:
            break
        done = np.max(np.abs(cand - beta)) < 1e-10
        beta, cur = cand, val
        if done:
            break
    mu = expit(X @ beta)
    H = (X.T * (w * mu * (1 - mu))) @ X + np.diag(prec[:p]) + 1e-8 * np.eye(p)
    return beta, np.linalg.inv(H)


def _prior_mean_pull(block: Block, prec) -> np.ndarray:
    out = np.zeros(block.design.shape[1])
    for j, e in enumerate(block.priors):
        if isinstance(e, Normal):
            out[j] = prec[j] * e.mean
        elif isinstance(e, DoubleExponential):
            out[j] = prec[j] * e.mean
    return out


def _proposal_factor(cov) -> np.ndarray:
    """Cholesky factor of the proposal covariance; zero-variance coordinates stay frozen."""
    cov = 0.5 * (cov + cov.T)
    live = np.flatnonzero(np.diag(cov) > 0)
    chol = np.zeros_like(cov)
    sub = cov[np.ix_(live, live)]
    try:
        chol[np.ix_(live, live)] = np.linalg.cholesky(sub)
    except np.linalg.LinAlgError:
        chol[live, live] = np.sqrt(np.clip(np.diag(sub), 1e-12, None))
    return chol


def block_stream(seed: int, chain_index: int, block_index: int) -> np.random.Generator:
    """Counter-based Philox stream for one (seed, chain, block) triple."""
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(int(chain_index), int(block_index)))
    return np.random.Generator(np.random.Philox(ss))


def sample_chain(config: SamplerConfig, spec: ModelSpec, priors: PriorSpec, panel: Panel,
                 blocks=None) -> ChainOutput:
    """Run one chain; returns only post-burn-in draws, every ``thin``-th kept."""
    blocks = blocks if blocks is not None else build_blocks(spec, panel, priors)
    n_total = config.burn_in + config.iterations
    pieces, traces, acc, scales, names, slices = [], [], {}, {}, [], {}
    start = 0
    for bi, b in enumerate(blocks):
        theta0, cov = _start_and_curvature(b)
        lp0 = b.loglik(theta0) + b.log_prior(theta0)
        if not math.isfinite(lp0):
            raise ValueError(f"non-finite initial log-posterior in block {b.key!r}")
        chol = _proposal_factor(cov)
        d = b.n_params
        scale0 = config.initial_step_scale if config.initial_step_scale is not None else 2.38 / math.sqrt(d)
        rng = block_stream(config.seed, config.chain_index, bi)
        normals = rng.standard_normal((n_total, d))
        uniforms = 1.0 - rng.random(n_total)
        kind, mean, param = b.prior_arrays()
        family = _kernels.FAMILY_BERNOULLI if b.family == BERNOULLI else _kernels.FAMILY_GAUSSIAN
        draws, trace, _acc_burn, acc_keep, scale = _kernels.rwm_chain(
            b.design, b.response, b.weights, family, kind, mean, param, theta0, chol, scale0,
            config.burn_in, config.iterations, config.thin, config.adapt,
            config.target_acceptance, ADAPT_WINDOW, normals, uniforms,
        )
        pieces.append(draws)
        traces.append(trace)
        acc[b.key] = acc_keep / config.iterations
        scales[b.key] = scale
        names.extend(b.labels)
        slices[b.key] = slice(start, start + d)
        start += d
    draws = np.hstack(pieces)
    trace = np.sum(traces, axis=0)
    return ChainOutput(draws, acc, trace, names, slices, scales)


def write_draws_csv(chain: ChainOutput, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", *chain.param_names, "log_post"])
        for i in range(chain.draws.shape[0]):
            w.writerow([i, *(repr(float(v)) for v in chain.draws[i]), repr(float(chain.log_posterior[i]))])
