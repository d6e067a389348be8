"""Standardization and effect estimation under static regimes.

Two standardizers share one history model. :func:`standardize_exact` sums over
every binary covariate path, weighting by the model-implied path probabilities,
so it carries no Monte Carlo noise. :func:`standardize_mc` simulates pseudo
subjects forward in time. Both draw baseline covariates from the empirical
distribution of the time-0 rows.

Within a time point the generation order is: covariates (in model order), then
exposure set by the regime, then outcome. Survival outcomes accumulate
cumulative incidence; Gaussian outcomes report the mean at each modelled time.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .core import (
    ALWAYS, BERNOULLI, EXPOSURE, GAUSSIAN, NEVER, OUTCOME, EffectEstimate, ModelSpec, Panel,
    PriorSpec, Regime, evaluate_terms,
)
from .glm import expit, fit_mle_batch
from .mcmc import SamplerConfig, build_blocks, ChainOutput, sample_chain

MAX_PATHS = 2**20
Z95 = 1.96
_CHUNK_CELLS = 2_000_000


class StandardizationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# history views over simulated paths
# ---------------------------------------------------------------------------


class _PathView:
    """Term-evaluation view over (subjects, paths) arrays at one time point."""

    def __init__(self, t, values, cumprev, g, shape):
        self.t = t
        self.values = values
        self.cumprev = cumprev
        self.g = float(g)
        self.shape = shape

    def ones(self):
        return np.ones(self.shape)

    def time(self):
        return np.full(self.shape, float(self.t))

    def value(self, name):
        if name == EXPOSURE:
            return np.full(self.shape, self.g)
        return self.values[name]

    def cum(self, name, lag):
        if name == EXPOSURE:
            return np.full(self.shape, self.g * (self.t + 1 - lag))
        if lag == 1:
            return self.cumprev[name]
        return self.cumprev[name] + self.values[name]


def _baseline(panel: Panel):
    rows = panel.baseline_rows()
    if rows.shape[0] != panel.n_subjects:
        raise StandardizationError("every subject needs a time-0 row")
    return {name: panel.covariates[name][rows].astype(np.float64) for name in panel.covariates}


def _coef_lists(spec: ModelSpec):
    out = []
    for model in spec.blocks():
        if model.coefficients is None:
            raise StandardizationError("standardization needs fitted coefficients on every model")
        out.append(np.atleast_2d(np.asarray(model.coefficients, dtype=np.float64)))
    return out


def _linpred(design, coefs):
    # design (n, P, p), coefs (D, p) -> (D, n, P)
    return np.einsum("npk,dk->dnp", design, coefs, optimize=True)


def count_paths(spec: ModelSpec, horizon: int) -> int:
    steps = sum(len(spec.covariate_times(m, horizon)) for m in spec.covariates)
    return 2**steps


def exact_feasible(spec: ModelSpec, panel: Panel, horizon: int | None = None) -> bool:
    k = panel.horizon if horizon is None else horizon
    if any(m.family != BERNOULLI for m in spec.covariates if spec.covariate_times(m, k)):
        return False
    return count_paths(spec, k) <= MAX_PATHS


def standardize_exact_batch(spec: ModelSpec, coefs, panel: Panel, regime: Regime,
                            horizon: int | None = None, subject_weights=None):
    """Exact standardized means for a batch of ``D`` coefficient sets.

    ``coefs`` holds one ``(D, p_b)`` array per model block (outcome first).
    ``subject_weights`` is ``(D, n)`` or ``(n,)``; rows are normalised to sum
    to one. Returns ``(times, means)`` with ``means`` of shape ``(D, len(times))``.
    """
    k = panel.horizon if horizon is None else int(horizon)
    for m in spec.covariates:
        if spec.covariate_times(m, k) and m.family != BERNOULLI:
            raise StandardizationError(f"exact enumeration needs binary covariates; {m.name!r} is {m.family}")
    n_paths = count_paths(spec, k)
    if n_paths > MAX_PATHS:
        raise StandardizationError(f"{n_paths} covariate paths exceed the enumeration guard of {MAX_PATHS}")
    coefs = [np.atleast_2d(np.asarray(c, dtype=np.float64)) for c in coefs]
    D = coefs[0].shape[0]
    n = panel.n_subjects
    if subject_weights is None:
        sw = np.full((1, n), 1.0 / n)
    else:
        sw = np.atleast_2d(np.asarray(subject_weights, dtype=np.float64))
        sw = sw / sw.sum(axis=1, keepdims=True)
    times = spec.outcome_times(k)
    out = np.empty((D, len(times)))
    chunk = max(1, _CHUNK_CELLS // max(1, n * n_paths))
    for lo in range(0, D, chunk):
        hi = min(D, lo + chunk)
        w_chunk = sw if sw.shape[0] == 1 else sw[lo:hi]
        out[lo:hi] = _enumerate(spec, [c[lo:hi] for c in coefs], panel, regime, k, w_chunk, times)
    return times, out


def _enumerate(spec, coefs, panel, regime, k, sw, times):
    D = coefs[0].shape[0]
    base = _baseline(panel)
    n = panel.n_subjects
    values = {name: v[:, None].copy() for name, v in base.items()}
    cumprev = {name: np.zeros((n, 1)) for name in base}
    weight = np.ones((D, n, 1))
    surv = np.ones((D, n, 1))
    risk = np.zeros((D, n))
    outcome_times = set(times)
    means = []
    cov_times = [set(spec.covariate_times(m, k)) for m in spec.covariates]
    for t in range(k + 1):
        for m, c, active in zip(spec.covariates, coefs[1:], cov_times):
            if t not in active:
                continue
            P = weight.shape[2]
            view = _PathView(t, values, cumprev, regime.g, (n, P))
            p1 = expit(_linpred(evaluate_terms(m.terms, view), c))
            for name in values:
                if name == m.name:
                    values[name] = np.concatenate([np.zeros((n, P)), np.ones((n, P))], axis=1)
                else:
                    values[name] = np.concatenate([values[name], values[name]], axis=1)
                cumprev[name] = np.concatenate([cumprev[name], cumprev[name]], axis=1)
            weight = np.concatenate([weight * (1.0 - p1), weight * p1], axis=2)
            surv = np.concatenate([surv, surv], axis=2)
        if t in outcome_times:
            P = weight.shape[2]
            view = _PathView(t, values, cumprev, regime.g, (n, P))
            lin = _linpred(evaluate_terms(spec.outcome.terms, view), coefs[0])
            if spec.outcome.family == BERNOULLI:
                h = expit(lin)
                risk = risk + np.sum(weight * surv * h, axis=2)
                surv = surv * (1.0 - h)
                means.append(np.sum(sw * risk, axis=1))
            else:
                means.append(np.sum(sw * np.sum(weight * lin, axis=2), axis=1))
        for name in values:
            cumprev[name] = cumprev[name] + values[name]
    return np.stack(means, axis=1)


def standardize_exact(spec: ModelSpec, panel: Panel, regime: Regime, horizon: int | None = None) -> np.ndarray:
    """Standardized mean outcome at each modelled time for fixed coefficients."""
    _, means = standardize_exact_batch(spec, _coef_lists(spec), panel, regime, horizon)
    return means[0]


def standardize_mc(spec: ModelSpec, panel: Panel, regime: Regime, horizon: int | None = None,
                   n_pseudo: int = 10_000, rng=None, subject_weights=None) -> np.ndarray:
    """Monte Carlo standardization with ``n_pseudo`` simulated subjects.

    Pseudo subjects draw baseline covariates from the (optionally weighted)
    empirical distribution, then covariates and outcomes forward in time;
    after a survival event a pseudo subject stops contributing new events.
    """
    if n_pseudo < 1:
        raise ValueError("n_pseudo must be at least 1")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    k = panel.horizon if horizon is None else int(horizon)
    coefs = _coef_lists(spec)
    base = _baseline(panel)
    n = panel.n_subjects
    p = None if subject_weights is None else np.asarray(subject_weights, dtype=np.float64) / np.sum(subject_weights)
    pick = rng.choice(n, size=n_pseudo, replace=True, p=p)
    values = {name: v[pick][:, None] for name, v in base.items()}
    cumprev = {name: np.zeros((n_pseudo, 1)) for name in base}
    alive = np.ones(n_pseudo, dtype=bool)
    events = np.zeros(n_pseudo)
    times = spec.outcome_times(k)
    cov_times = [set(spec.covariate_times(m, k)) for m in spec.covariates]
    out = []
    for t in range(k + 1):
        for m, c, active in zip(spec.covariates, coefs[1:], cov_times):
            if t not in active:
                continue
            view = _PathView(t, values, cumprev, regime.g, (n_pseudo, 1))
            lin = _linpred(evaluate_terms(m.terms, view), c)[0, :, 0]
            if m.family == BERNOULLI:
                draw = (rng.random(n_pseudo) < expit(lin)).astype(np.float64)
            else:
                draw = lin + (m.sigma or 0.0) * rng.standard_normal(n_pseudo)
            values[m.name] = draw[:, None]
        if t in times:
            view = _PathView(t, values, cumprev, regime.g, (n_pseudo, 1))
            lin = _linpred(evaluate_terms(spec.outcome.terms, view), coefs[0])[0, :, 0]
            if spec.outcome.family == BERNOULLI:
                hit = alive & (rng.random(n_pseudo) < expit(lin))
                events[hit] = 1.0
                alive &= ~hit
                out.append(events.mean())
            else:
                sigma = spec.outcome.sigma or 0.0
                out.append(float(np.mean(lin + sigma * rng.standard_normal(n_pseudo))))
        for name in values:
            cumprev[name] = cumprev[name] + values[name]
    return np.asarray(out)


# ---------------------------------------------------------------------------
# effect summaries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EffectSummary:
    wald: EffectEstimate
    percentile: EffectEstimate
    covered: bool | None = None


def summarize_effect(draws, truth: float | None = None) -> EffectSummary:
    """Mean, SD, Wald (mean +/- 1.96 SD) and 2.5/97.5 percentile intervals.

    ``covered`` uses the Wald interval.
    """
    draws = np.asarray(draws, dtype=np.float64)
    if draws.ndim != 1 or draws.shape[0] < 2:
        raise ValueError("need at least two draws to summarise an effect")
    point = float(np.mean(draws))
    se = float(np.std(draws, ddof=1))
    if np.all(draws == draws[0]):
        point, se = float(draws[0]), 0.0
    wald = EffectEstimate(point, se, point - Z95 * se, point + Z95 * se, "wald", draws)
    lo, hi = np.percentile(draws, [2.5, 97.5])
    pct = EffectEstimate(point, se, float(lo), float(hi), "percentile", draws)
    covered = None if truth is None else bool(wald.ci_low <= truth <= wald.ci_high)
    return EffectSummary(wald, pct, covered)


@dataclass
class GFormulaResult:
    method: str
    times: tuple
    regimes: tuple
    mean_draws: dict
    effect_draws: np.ndarray
    effect: EffectEstimate
    effect_percentile: EffectEstimate
    divergence_count: int = 0
    standardizer: str = "exact"
    chain: ChainOutput | None = field(default=None, repr=False)
    full_data_effect: float | None = None

    @property
    def means(self) -> dict:
        return {name: d.mean(axis=0) for name, d in self.mean_draws.items()}


def _finish(method, times, regimes, per_regime, divergence_count, standardizer, chain=None, full=None):
    a, b = regimes
    eff = per_regime[a.name][:, -1] - per_regime[b.name][:, -1]
    summ = summarize_effect(eff)
    return GFormulaResult(method, tuple(times), tuple(regimes), per_regime, eff, summ.wald,
                          summ.percentile, divergence_count, standardizer, chain, full)


def _standardize_many(spec, coefs, panel, regimes, horizon, subject_weights, n_pseudo, rng, sigmas=None):
    """Per-regime ``(D, T)`` means, exact when feasible else Monte Carlo.

    ``sigmas`` (one ``(D,)`` array or None per block) feeds Gaussian draws in
    the Monte Carlo path only.
    """
    if exact_feasible(spec, panel, horizon):
        out = {}
        times = None
        for r in regimes:
            times, out[r.name] = standardize_exact_batch(spec, coefs, panel, r, horizon, subject_weights)
        return times, out, "exact"
    k = panel.horizon if horizon is None else horizon
    D = coefs[0].shape[0]
    out = {r.name: [] for r in regimes}
    for d in range(D):
        sig = [None if sigmas is None or sigmas[j] is None else float(sigmas[j][d]) for j in range(len(coefs))]
        s = spec.with_coefficients([c[d] for c in coefs], sig)
        sw = None
        if subject_weights is not None:
            sw = subject_weights if np.ndim(subject_weights) == 1 else subject_weights[d]
        for r in regimes:
            out[r.name].append(standardize_mc(s, panel, r, k, n_pseudo, rng, sw))
    return spec.outcome_times(k), {key: np.array(v) for key, v in out.items()}, "mc"


def _subject_rows(panel: Panel, spec: ModelSpec):
    blocks = build_blocks(spec, panel)
    idx = []
    k = panel.horizon
    for key, model in [("y", spec.outcome)] + [(m.name, m) for m in spec.covariates]:
        times = spec.outcome_times(k) if key == "y" else spec.covariate_times(model, k)
        rows = np.flatnonzero(np.isin(panel.time, times))
        idx.append(panel.subject_index[rows])
    return blocks, idx


def make_rng(seed, *keys) -> np.random.Generator:
    """Philox generator keyed by ``(seed, *keys)``; streams for different keys are independent."""
    if isinstance(seed, np.random.Generator):
        return seed
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def frequentist_gformula(panel: Panel, spec: ModelSpec, regimes=(ALWAYS, NEVER), n_boot: int = 200,
                         rng=0, horizon: int | None = None, n_pseudo: int = 10_000) -> GFormulaResult:
    """Parametric g-formula with a subject-level nonparametric bootstrap.

    Each resample draws ``n`` subjects with replacement (all of a subject's
    rows travel together), refits every model by maximum likelihood and
    standardizes. The point estimate is the mean contrast over resamples and
    the standard error their SD. Refits that hit the coefficient clamp are kept
    and counted in ``divergence_count``.
    """
    if n_boot < 2:
        raise ValueError("the bootstrap needs at least two resamples")
    rng = make_rng(rng)
    n = panel.n_subjects
    blocks, subj = _subject_rows(panel, spec)
    counts = rng.multinomial(n, np.full(n, 1.0 / n), size=n_boot).astype(np.float64)
    coefs, sigmas, flagged = [], [], np.zeros(n_boot, dtype=bool)
    for b, sidx in zip(blocks, subj):
        W = counts[:, sidx]
        fits = fit_mle_batch(b.design, b.response, b.family, W)
        coefs.append(np.array([f.coefficients for f in fits]))
        sigmas.append(np.array([f.sigma for f in fits]) if b.family == GAUSSIAN else None)
        flagged |= np.array([f.divergence_flag for f in fits])
        usable = W.sum(axis=1) > 0
        if usable.sum() < 2:
            raise ValueError(f"fewer than two usable resamples for the {b.key!r} model")
    times, per_regime, how = _standardize_many(spec, coefs, panel, regimes, horizon, counts, n_pseudo, rng, sigmas)
    full = _full_data_effect(panel, spec, blocks, regimes, horizon, n_pseudo, rng)
    return _finish("bootstrap", times, regimes, per_regime, int(flagged.sum()), how, None, full)


def _full_data_effect(panel, spec, blocks, regimes, horizon, n_pseudo, rng):
    coefs, sigmas = [], []
    for b in blocks:
        fit = fit_mle_batch(b.design, b.response, b.family, b.weights[None, :])[0]
        coefs.append(fit.coefficients[None, :])
        sigmas.append(None if fit.sigma is None else np.array([fit.sigma]))
    _, per, _ = _standardize_many(spec, coefs, panel, regimes, horizon, None, n_pseudo, rng, sigmas)
    a, c = regimes
    return float(per[a.name][0, -1] - per[c.name][0, -1])


def bayesian_gformula(panel: Panel, spec: ModelSpec, priors: PriorSpec, regimes=(ALWAYS, NEVER),
                      sampler: SamplerConfig = SamplerConfig(), horizon: int | None = None,
                      n_pseudo: int = 10_000) -> GFormulaResult:
    """Posterior-predictive g-formula: standardize under every retained posterior draw.

    Baseline covariates come from their empirical distribution. The effect
    point is the posterior mean of the per-draw contrasts, ``se`` their SD.
    """
    blocks = build_blocks(spec, panel, priors)
    chain = sample_chain(sampler, spec, priors, panel, blocks)
    coefs = []
    for b in blocks:
        coefs.append(chain.block(b.key)[:, : b.design.shape[1]])
    rng = make_rng(sampler.seed, sampler.chain_index, 1_000_003)
    sigmas = [np.exp(chain.block(b.key)[:, -1]) if b.family == GAUSSIAN else None for b in blocks]
    times, per_regime, how = _standardize_many(spec, coefs, panel, regimes, horizon, None, n_pseudo, rng, sigmas)
    return _finish("bayes", times, regimes, per_regime, 0, how, chain)


def write_effect_report(result: GFormulaResult, path, metadata: dict | None = None) -> None:
    """CSV with header ``regime,time,mean,se,ci_low,ci_high,ci_method``.

    One row per regime and time plus the contrast (first regime minus second),
    each with a Wald and a percentile interval.
    """
    a, b = result.regimes
    series = dict(result.mean_draws)
    series[f"{a.name}-{b.name}"] = result.mean_draws[a.name] - result.mean_draws[b.name]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for key, val in (metadata or {}).items():
            fh.write(f"# {key}={val}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["regime", "time", "mean", "se", "ci_low", "ci_high", "ci_method"])
        for name, d in series.items():
            for j, t in enumerate(result.times):
                s = summarize_effect(d[:, j])
                for est in (s.wald, s.percentile):
                    w.writerow([name, t, f"{est.point:.6f}", f"{est.se:.6f}", f"{est.ci_low:.6f}",
                                f"{est.ci_high:.6f}", est.ci_method])
