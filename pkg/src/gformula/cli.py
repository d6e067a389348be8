"""Command-line entry point: ``gformula simulate|fit|effect|replicate``.

Every subcommand accepts ``--config FILE``. The file is flat ``key = value``
text: one setting per line, keys are the long option names (``n-boot`` and
``n_boot`` are the same key), ``#`` starts a comment, blank lines are ignored,
and repeatable options (``model``) may appear on several lines. Flags given on
the command line override the file; a repeatable flag replaces every file
value for that key.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import re
import sys

import numpy as np

from . import __version__, _kernels
from .core import (
    BERNOULLI, FAMILIES, OUTCOME, CovariateModel, DoubleExponential, ExposureModel, ModelSpec,
    Normal, OutcomeModel, PriorSpec, SpecError, TermList, default_priors, parse_regime,
    read_panel_csv, validate_panel, write_panel_csv,
)
from .estimate import bayesian_gformula, frequentist_gformula, make_rng, write_effect_report
from .glm import expit, fit_mle
from .harness import replicate_table
from .mcmc import SamplerConfig, build_blocks, sample_chain, write_draws_csv
from .simgen import (
    TimeFixedDGP, TimeVaryingDGP, gen_demo_cohort, gen_time_fixed, gen_time_varying,
)

log = logging.getLogger("gformula")

_MODEL = re.compile(r"^\s*(\w+)\s*(?::\s*(\w+))?\s*(?:@\s*([\d,\s]+))?\s*~\s*(.+)$")


class ConfigError(ValueError):
    pass


def read_config(path) -> dict:
    """Parse a flat key-value file into ``{key: [values...]}`` (keys normalised to underscores)."""
    out: dict = {}
    with open(path, encoding="utf-8") as fh:
        for n, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected key = value")
            key, value = line.split("=", 1)
            key = key.strip().replace("-", "_")
            if not key:
                raise ConfigError(f"{path}:{n}: empty key")
            out.setdefault(key, []).append(value.strip())
    return out


def parse_model(text: str):
    """One model line: ``name[:family][@t1,t2] ~ terms``.

    ``y`` is the outcome, ``x`` the (optional, never used for estimation)
    exposure model, anything else a time-varying covariate.
    """
    m = _MODEL.match(text)
    if not m:
        raise SpecError(f"cannot parse model {text!r}; expected 'name[:family][@times] ~ terms'")
    name, family, times, rhs = m.groups()
    family = (family or BERNOULLI).lower()
    if family not in FAMILIES:
        raise SpecError(f"unknown family {family!r}")
    times = tuple(int(t) for t in times.split(",") if t.strip()) if times else None
    terms = TermList.parse(rhs)
    if name == OUTCOME:
        return OutcomeModel(terms, family, times)
    if name == "x":
        return ExposureModel(terms)
    return CovariateModel(name, terms, family, times)


def build_spec(lines) -> ModelSpec:
    outcome, exposure, covs = None, None, []
    for line in lines:
        model = parse_model(line)
        if isinstance(model, OutcomeModel):
            if outcome is not None:
                raise SpecError("more than one outcome model")
            outcome = model
        elif isinstance(model, ExposureModel):
            exposure = model
        else:
            covs.append(model)
    if outcome is None:
        raise SpecError("an outcome model 'y ~ ...' is required")
    return ModelSpec(outcome, tuple(covs), exposure)


def build_priors(text: str, spec: ModelSpec) -> PriorSpec:
    """``default`` | ``flat`` | ``normal:VAR`` | ``lasso[:RATE]``.

    ``normal`` and ``lasso`` keep the vague N(log 0.5, 1000) intercept and put
    the named prior, centred at 0, on every other coefficient.
    """
    kind, _, arg = text.strip().lower().partition(":")
    intercept = Normal(math.log(0.5), 1000.0)
    if kind == "default":
        return default_priors(spec)
    if kind == "flat":
        return PriorSpec.flat()
    if kind == "normal":
        return PriorSpec.intercept_and_slopes(spec, intercept, Normal(0.0, float(arg or 3.0)))
    if kind == "lasso":
        return PriorSpec.intercept_and_slopes(spec, intercept, DoubleExponential(0.0, float(arg or 1.0)))
    raise SpecError(f"unknown prior setting {text!r}")


def _meta(args, **extra) -> dict:
    meta = {"gformula": __version__, "numpy": np.__version__, "kernels": _kernels.backend(),
            "command": args.command}
    for key in sorted(vars(args)):
        if key in ("command", "config", "func", "verbose"):
            continue
        val = getattr(args, key)
        meta[key] = "|".join(val) if isinstance(val, list) else val
    meta.update(extra)
    return meta


def _load(args):
    panel = read_panel_csv(args.data)
    problems = validate_panel(panel)
    if problems:
        raise SpecError("invalid panel: " + "; ".join(problems))
    if not args.model:
        raise SpecError("at least one --model is required")
    return panel, build_spec(args.model)


def _sampler(args) -> SamplerConfig:
    return SamplerConfig(args.iterations, args.burn_in, args.thin, seed=args.seed,
                         initial_step_scale=args.step_scale, adapt=not args.no_adapt)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    rng = make_rng(args.seed)
    if args.scenario == "time_fixed":
        panel, _ = gen_time_fixed(TimeFixedDGP(args.n, args.rho, args.rd), rng)
    elif args.scenario == "time_varying":
        panel, _ = gen_time_varying(TimeVaryingDGP(args.n, args.rd), rng)
    else:
        panel = gen_demo_cohort(args.n, rng, args.visits)
    write_panel_csv(panel, args.out, _meta(args))
    return 0


def _mle_rows(blocks):
    rows = []
    for b in blocks:
        fit = fit_mle(b.design, b.response, b.family, b.weights)
        X, w, beta = b.design, b.weights, fit.coefficients
        if b.family == BERNOULLI:
            mu = expit(X @ beta)
            info = (X.T * (w * mu * (1 - mu))) @ X
        else:
            info = (X.T * w) @ X / fit.sigma**2
        try:
            se = np.sqrt(np.diag(np.linalg.inv(info)))
        except np.linalg.LinAlgError:
            se = np.full(beta.shape, np.nan)
        for lab, est, s in zip(b.labels, beta, se):
            rows.append([lab, est, s, est - 1.96 * s, est + 1.96 * s])
        if b.family != BERNOULLI:
            rows.append([b.labels[-1], math.log(fit.sigma), float("nan"), float("nan"), float("nan")])
        if fit.divergence_flag:
            log.warning("model %r: coefficients hit the clamp (separation?)", b.key)
    return rows


def cmd_fit(args) -> int:
    panel, spec = _load(args)
    if args.method == "mle":
        rows = _mle_rows(build_blocks(spec, panel))
        extra = {}
    else:
        priors = build_priors(args.priors, spec)
        chain = sample_chain(_sampler(args), spec, priors, panel)
        d = chain.draws
        lo, hi = np.percentile(d, [2.5, 97.5], axis=0)
        rows = [[n, m, s, a, b] for n, m, s, a, b in
                zip(chain.param_names, d.mean(axis=0), d.std(axis=0, ddof=1), lo, hi)]
        extra = {f"acceptance_{k}": f"{v:.4f}" for k, v in chain.acceptance_rate.items()}
        if args.draws:
            write_draws_csv(chain, args.draws)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        for k, v in _meta(args, **extra).items():
            fh.write(f"# {k}={v}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter", "estimate", "se", "ci_low", "ci_high"])
        for r in rows:
            w.writerow([r[0], *(f"{float(v):.6f}" if math.isfinite(v) else "NA" for v in r[1:])])
    return 0


def cmd_effect(args) -> int:
    panel, spec = _load(args)
    regimes = tuple(parse_regime(r) for r in args.regime.split(","))
    if len(regimes) != 2:
        raise SpecError("--regime takes exactly two regimes, e.g. always,never")
    if args.method == "bootstrap":
        res = frequentist_gformula(panel, spec, regimes, args.n_boot, args.seed, args.horizon, args.n_pseudo)
        extra = {"divergent_resamples": res.divergence_count}
    else:
        priors = build_priors(args.priors, spec)
        res = bayesian_gformula(panel, spec, priors, regimes, _sampler(args), args.horizon, args.n_pseudo)
        extra = {f"acceptance_{k}": f"{v:.4f}" for k, v in res.chain.acceptance_rate.items()}
    extra["standardizer"] = res.standardizer
    write_effect_report(res, args.out, _meta(args, **extra))
    return 0


def cmd_replicate(args) -> int:
    overrides = {"M": args.M, "S": args.S, "C": args.C, "B": args.B}
    replicate_table(args.table, args.scale, args.out, args.seed, args.workers,
                    n_time_fixed=args.n_time_fixed, **overrides)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _sampler_flags(p):
    p.add_argument("--priors", default="default", help="default | flat | normal:VAR | lasso[:RATE]")
    p.add_argument("--iterations", type=int, default=2000, help="kept iterations after burn-in")
    p.add_argument("--burn-in", type=int, default=500)
    p.add_argument("--thin", type=int, default=1)
    p.add_argument("--step-scale", type=float, default=None)
    p.add_argument("--no-adapt", action="store_true")


def _model_flags(p):
    p.add_argument("--data", required=False, help="panel CSV (id,time,y,x,...)")
    p.add_argument("--model", action="append", default=None,
                   help="'name[:family][@times] ~ terms', repeatable; name y is the outcome")


def make_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="gformula", description=__doc__.splitlines()[0])
    top.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = top.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", default=None, help="flat key = value settings file")
        p.add_argument("-v", "--verbose", action="store_true")
        p.set_defaults(func=func)
        return p

    p = add("simulate", cmd_simulate, "write a simulated panel")
    p.add_argument("--scenario", choices=("time_fixed", "time_varying", "demo"), default="time_varying")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--rho", type=float, default=0.9)
    p.add_argument("--rd", type=float, default=0.0)
    p.add_argument("--visits", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)

    p = add("fit", cmd_fit, "fit the models by MLE or MCMC")
    _model_flags(p)
    p.add_argument("--method", choices=("mle", "bayes"), default="bayes")
    _sampler_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--draws", default=None, help="also write posterior draws here")
    p.add_argument("--out", default=None)

    p = add("effect", cmd_effect, "estimate a regime contrast")
    _model_flags(p)
    p.add_argument("--regime", default="always,never")
    p.add_argument("--method", choices=("bootstrap", "bayes"), default="bayes")
    p.add_argument("--n-boot", type=int, default=200)
    p.add_argument("--n-pseudo", type=int, default=10_000)
    p.add_argument("--horizon", type=int, default=None)
    _sampler_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)

    p = add("replicate", cmd_replicate, "run a simulation table")
    p.add_argument("--table", type=int, choices=(1, 2), default=2)
    p.add_argument("--scale", choices=("desk", "full"), default="desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--n-time-fixed", type=int, default=40)
    for k in ("M", "S", "C", "B"):
        p.add_argument(f"--{k}", type=int, default=None, help=f"override the scale's {k}")
    p.add_argument("--out", default=None)
    return top


def _apply_config(parser, sub_parser, argv, path):
    """Re-parse with the file's values as defaults so explicit flags win."""
    values = read_config(path)
    actions = {a.dest: a for a in sub_parser._actions}
    defaults = {}
    for key, vals in values.items():
        a = actions.get(key)
        if a is None or key in ("config", "help"):
            raise ConfigError(f"{path}: unknown setting {key!r}")
        if isinstance(a, argparse._AppendAction):
            defaults[key] = list(vals)
            continue
        if isinstance(a, argparse._StoreTrueAction):
            defaults[key] = vals[-1].lower() in ("1", "true", "yes", "on")
            continue
        raw = vals[-1]
        conv = a.type or str
        try:
            val = conv(raw)
        except ValueError:
            raise ConfigError(f"{path}: bad value for {key!r}: {raw!r}") from None
        if a.choices is not None and val not in a.choices:
            raise ConfigError(f"{path}: {key!r} must be one of {list(a.choices)}")
        defaults[key] = val
    append_defaults = {k: v for k, v in defaults.items() if isinstance(actions[k], argparse._AppendAction)}
    sub_parser.set_defaults(**{k: v for k, v in defaults.items() if k not in append_defaults})
    args = parser.parse_args(argv)
    for k, v in append_defaults.items():
        if getattr(args, k) is None:
            setattr(args, k, v)
    return args


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = make_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub_parser = parser._subparsers._group_actions[0].choices[args.command]
        try:
            args = _apply_config(parser, sub_parser, argv, args.config)
        except (ConfigError, OSError) as exc:
            parser.exit(2, f"gformula: {exc}\n")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command != "replicate" and args.out is None:
        parser.exit(2, "gformula: --out is required\n")
    if args.command == "replicate" and args.out is None:
        args.out = "."
    if args.command in ("fit", "effect") and not args.data:
        parser.exit(2, "gformula: --data is required\n")
    try:
        return args.func(args)
    except (SpecError, ValueError) as exc:
        parser.exit(1, f"gformula: error: {exc}\n")


if __name__ == "__main__":
    sys.exit(main())
