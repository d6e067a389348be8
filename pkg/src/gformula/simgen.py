"""Data-generating processes for the time-fixed and time-varying simulation studies.

Every subject consumes a fixed block of uniforms from one counter-based
stream, so subject ``i`` of a dataset is the same whatever ``n`` is.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .core import (
    BERNOULLI, GAUSSIAN, CovariateModel, ModelSpec, OutcomeModel, Panel, TermList,
)


def nu_from_rho(rho: float) -> tuple:
    """Cell proportions of the X-by-L table with both margins 0.5 and correlation ``rho``."""
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"rho must lie in [0, 1), got {rho}")
    a = 0.25 + rho / 4.0
    b = 0.25 - rho / 4.0
    return (a, b, b, a)


def rho_from_nu(nu) -> float:
    n1, n2, n3, n4 = nu
    return (n1 * n4 - n2 * n3) / math.sqrt((n1 + n3) * (n2 + n4) * (n1 + n2) * (n3 + n4))


@dataclass(frozen=True)
class TimeFixedDGP:
    n: int
    rho: float
    true_rd: float = 0.0
    nu: tuple = field(init=False)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be positive")
        object.__setattr__(self, "nu", nu_from_rho(self.rho))


@dataclass(frozen=True)
class TimeVaryingDGP:
    n: int
    true_rd: float = 0.0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be positive")
        if not 0.0 <= self.true_rd <= 0.5:
            raise ValueError("true_rd must lie in [0, 0.5] to keep U + rd a probability")


def _rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.Generator(np.random.Philox(rng))


def gen_time_fixed(dgp: TimeFixedDGP, rng) -> tuple:
    """One time-fixed dataset; returns ``(panel, U)`` with U kept out of the panel.

    U ~ uniform(0,1); L = 1{U < nu1 + nu2}; X | L=1 ~ Bernoulli(nu1 + nu4),
    X | L=0 ~ Bernoulli(nu2 + nu3); Y ~ Bernoulli(0.4 + U/10 + rd * X).
    """
    u = _rng(rng).random((dgp.n, 3))
    n1, n2, n3, n4 = dgp.nu
    U = u[:, 0]
    L = (U < n1 + n2).astype(np.float64)
    px = np.where(L == 1.0, n1 + n4, n2 + n3)
    X = (u[:, 1] < px).astype(np.float64)
    py = 0.4 + U / 10.0 + dgp.true_rd * X
    if np.any((py < 0.0) | (py > 1.0)):
        raise ValueError("outcome probability left [0, 1]; true_rd too large")
    Y = (u[:, 2] < py).astype(np.float64)
    ids = np.arange(dgp.n)
    panel = Panel.from_columns(ids, np.zeros(dgp.n), Y, X, {"l": L}, {"y", "x", "l"})
    return panel, U


def gen_time_varying(dgp: TimeVaryingDGP, rng) -> tuple:
    """One two-period dataset; returns ``(panel, U)``.

    Rows at t=0 carry X(0) with a placeholder l=0 and y=0 (no outcome is
    measured at baseline); rows at t=1 carry L(1), X(1) and the outcome Y.
    """
    u = _rng(rng).random((dgp.n, 5))
    U = 0.4 + 0.1 * u[:, 0]
    X0 = (u[:, 1] < 0.5).astype(np.float64)
    L1 = (u[:, 2] < expit(-1.0 + X0 + U)).astype(np.float64)
    X1 = (u[:, 3] < expit(-1.0 + X0 + L1)).astype(np.float64)
    Y = (u[:, 4] < U + dgp.true_rd * (X0 + X1) / 2.0).astype(np.float64)
    n = dgp.n
    ids = np.repeat(np.arange(n), 2)
    time = np.tile([0, 1], n)
    x = np.column_stack([X0, X1]).ravel()
    l = np.column_stack([np.zeros(n), L1]).ravel()
    y = np.column_stack([np.zeros(n), Y]).ravel()
    panel = Panel.from_columns(ids, time, y, x, {"l": l}, {"y", "x", "l"})
    return panel, U


def time_fixed_spec() -> ModelSpec:
    """Analysis model: logistic outcome model in X and L; L from its empirical distribution."""
    return ModelSpec(OutcomeModel(TermList.parse("1 + x + l")))


def time_varying_spec() -> ModelSpec:
    """Analysis models: L(1) logistic in X(0); Y(1) logistic in X(0), X(1), L(1)."""
    return ModelSpec(
        OutcomeModel(TermList.parse("1 + cumlag(x) + x + l"), BERNOULLI, times=(1,)),
        (CovariateModel("l", TermList.parse("1 + cumlag(x)"), BERNOULLI, times=(1,)),),
    )


def true_rd_time_varying(dgp: TimeVaryingDGP) -> float:
    # E[Y | always] - E[Y | never] = (E[U] + rd) - E[U]
    return dgp.true_rd


# ---------------------------------------------------------------------------
# structural demo cohort (not a replication of any real study)
# ---------------------------------------------------------------------------


def gen_demo_cohort(n: int, rng, visits: int = 3) -> Panel:
    """Synthetic longitudinal cohort with a Gaussian outcome, arbitrary coefficients.

    Shape only: a binary baseline confounder ``smoke_preg``, a time-varying
    binary covariate ``pa`` and binary exposure ``x`` at each visit, and a
    continuous outcome ``y`` at every visit. Nothing here is calibrated to data.
    """
    g = _rng(rng)
    k = visits - 1
    smoke = (g.random(n) < 0.2).astype(np.float64)
    rows = {"id": [], "time": [], "y": [], "x": [], "pa": [], "smoke_preg": []}
    cum_x = np.zeros(n)
    cum_pa = np.zeros(n)
    for t in range(k + 1):
        if t == 0:
            pa = (g.random(n) < 0.5).astype(np.float64)
        else:
            pa = (g.random(n) < expit(0.2 - 0.3 * cum_x + 0.5 * cum_pa)).astype(np.float64)
        x = (g.random(n) < expit(-1.2 + 0.4 * smoke + 1.5 * cum_x - 0.3 * pa)).astype(np.float64)
        cum_x += x
        y = 0.3 + 0.1 * t + 0.15 * x + 0.1 * cum_x - 0.2 * pa + 0.2 * smoke + 0.8 * g.standard_normal(n)
        cum_pa += pa
        rows["id"].append(np.arange(n))
        rows["time"].append(np.full(n, t))
        rows["y"].append(y)
        rows["x"].append(x)
        rows["pa"].append(pa)
        rows["smoke_preg"].append(smoke)
    cols = {key: np.concatenate(v) for key, v in rows.items()}
    return Panel.from_columns(cols["id"], cols["time"], cols["y"], cols["x"],
                              {"pa": cols["pa"], "smoke_preg": cols["smoke_preg"]},
                              {"x", "pa", "smoke_preg"})


def demo_spec() -> ModelSpec:
    return ModelSpec(
        OutcomeModel(TermList.parse("1 + t + x + cum(x) + pa + smoke_preg"), GAUSSIAN),
        (CovariateModel("pa", TermList.parse("1 + t + cumlag(x) + cumlag(pa) + smoke_preg")),),
    )
