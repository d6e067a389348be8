"""Shared domain types: panels, model terms, model/prior specifications, regimes."""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np

RESERVED = ("id", "time", "y", "x")
EXPOSURE = "x"
OUTCOME = "y"


class PanelError(ValueError):
    pass


class SpecError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Panel
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Panel:
    """Long-format subject-by-time data, sorted by ``(id, time)``.

    ``binary`` names the columns that are typed 0/1. Columns are never retyped
    after construction; :func:`validate_panel` checks the declared types.
    """

    ids: np.ndarray
    time: np.ndarray
    y: np.ndarray
    x: np.ndarray
    covariates: Mapping[str, np.ndarray]
    binary: frozenset = frozenset({"y", "x"})

    @classmethod
    def from_columns(cls, ids, time, y, x, covariates=None, binary=None) -> "Panel":
        ids = np.asarray(ids, dtype=np.int64)
        time = np.asarray(time, dtype=np.int64)
        order = np.lexsort((time, ids))
        covariates = dict(covariates or {})
        for name in covariates:
            if name in RESERVED:
                raise PanelError(f"covariate name {name!r} is reserved")
        cols = {k: np.asarray(v, dtype=np.float64)[order] for k, v in covariates.items()}
        for v in cols.values():
            v.flags.writeable = False
        arrays = [ids[order], time[order], np.asarray(y, dtype=np.float64)[order],
                  np.asarray(x, dtype=np.float64)[order]]
        for a in arrays:
            a.flags.writeable = False
        if binary is None:
            binary = {"y", "x"}
        return cls(*arrays, covariates=cols, binary=frozenset(binary))

    @property
    def n_rows(self) -> int:
        return int(self.ids.shape[0])

    @cached_property
    def subject_ids(self) -> np.ndarray:
        return np.unique(self.ids)

    @property
    def n_subjects(self) -> int:
        return int(self.subject_ids.shape[0])

    @property
    def horizon(self) -> int:
        return int(self.time.max()) if self.n_rows else 0

    @property
    def covariate_names(self) -> tuple:
        return tuple(self.covariates)

    @cached_property
    def subject_index(self) -> np.ndarray:
        """Row -> 0-based position of the row's subject in ``subject_ids``."""
        return np.searchsorted(self.subject_ids, self.ids)

    def column(self, name: str) -> np.ndarray:
        if name == OUTCOME:
            return self.y
        if name == EXPOSURE:
            return self.x
        try:
            return self.covariates[name]
        except KeyError:
            raise PanelError(f"unknown column {name!r}") from None

    def has_column(self, name: str) -> bool:
        return name in (OUTCOME, EXPOSURE) or name in self.covariates

    @cached_property
    def _cumsums(self) -> dict:
        # within-subject running sums, inclusive of the current row
        out = {}
        starts = np.r_[True, self.ids[1:] != self.ids[:-1]]
        group = np.cumsum(starts) - 1
        for name in (EXPOSURE, *self.covariates):
            col = self.column(name)
            total = np.cumsum(col)
            offset = np.r_[0.0, total][np.flatnonzero(starts)]
            out[name] = total - offset[group]
        return out

    def cumsum(self, name: str) -> np.ndarray:
        if name not in self._cumsums:
            raise PanelError(f"unknown column {name!r}")
        return self._cumsums[name]

    def rows_at(self, t: int) -> np.ndarray:
        return np.flatnonzero(self.time == t)

    def baseline_rows(self) -> np.ndarray:
        return self.rows_at(0)

    def take_subjects(self, positions: Sequence[int]) -> "Panel":
        """Panel made of the subjects at ``positions`` (repeats allowed), relabelled 0..m-1."""
        positions = np.asarray(positions, dtype=np.int64)
        row_lists = self._rows_by_subject
        rows = np.concatenate([row_lists[p] for p in positions]) if len(positions) else np.array([], int)
        new_ids = np.concatenate([np.full(row_lists[p].shape[0], k) for k, p in enumerate(positions)])
        return Panel.from_columns(
            new_ids, self.time[rows], self.y[rows], self.x[rows],
            {k: v[rows] for k, v in self.covariates.items()}, self.binary,
        )

    @cached_property
    def _rows_by_subject(self) -> list:
        bounds = np.flatnonzero(np.r_[True, self.ids[1:] != self.ids[:-1], True])
        return [np.arange(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]


def validate_panel(panel: Panel) -> list:
    """Return every invariant violation as a human-readable string; empty means ok."""
    problems = []
    for name in sorted(panel.binary):
        if not panel.has_column(name):
            problems.append(f"binary column {name!r} is not present")
            continue
        col = panel.column(name)
        bad = np.flatnonzero((col != 0.0) & (col != 1.0))
        for r in bad:
            problems.append(
                f"column {name!r} has non-binary value {col[r]:g} at subject {panel.ids[r]}, time {panel.time[r]}"
            )
    for name in (OUTCOME, EXPOSURE, *panel.covariates):
        col = panel.column(name)
        for r in np.flatnonzero(~np.isfinite(col)):
            problems.append(f"column {name!r} is missing at subject {panel.ids[r]}, time {panel.time[r]}")
    survival = OUTCOME in panel.binary
    for rows in panel._rows_by_subject:
        sid = panel.ids[rows[0]]
        times = panel.time[rows]
        expected = np.arange(times.shape[0])
        if not np.array_equal(times, expected):
            problems.append(f"subject {sid} has non-contiguous times {tuple(int(t) for t in times)}")
        if survival:
            ys = panel.y[rows]
            hit = np.flatnonzero(ys == 1.0)
            if hit.size and hit[0] < rows.shape[0] - 1:
                problems.append(
                    f"subject {sid} has rows after its event at time {int(times[hit[0]])}"
                )
    return problems


# ---------------------------------------------------------------------------
# Terms
# ---------------------------------------------------------------------------


class Term:
    """One column of a design matrix, evaluated on a history view."""

    def columns(self) -> set:
        return set()

    def uses_exposure(self) -> bool:
        return EXPOSURE in self.columns()


@dataclass(frozen=True)
class Intercept(Term):
    def evaluate(self, view):
        return view.ones()

    def __str__(self):
        return "1"


@dataclass(frozen=True)
class Time(Term):
    def evaluate(self, view):
        return view.time()

    def __str__(self):
        return "t"


@dataclass(frozen=True)
class Column(Term):
    name: str

    def evaluate(self, view):
        return view.value(self.name)

    def columns(self):
        return {self.name}

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class CumSum(Term):
    """Running sum of a column through ``t - lag`` (lag 1 is empty at t=0)."""

    name: str
    lag: int = 0

    def __post_init__(self):
        if self.lag not in (0, 1):
            raise SpecError(f"lag must be 0 or 1, got {self.lag}")

    def evaluate(self, view):
        return view.cum(self.name, self.lag)

    def columns(self):
        return {self.name}

    def __str__(self):
        return f"cum({self.name})" if self.lag == 0 else f"cumlag({self.name})"


@dataclass(frozen=True)
class Product(Term):
    left: Term
    right: Term

    def evaluate(self, view):
        return self.left.evaluate(view) * self.right.evaluate(view)

    def columns(self):
        return self.left.columns() | self.right.columns()

    def __str__(self):
        return f"{self.left}*{self.right}"


@dataclass(frozen=True)
class Square(Term):
    inner: Term

    def evaluate(self, view):
        v = self.inner.evaluate(view)
        return v * v

    def columns(self):
        return self.inner.columns()

    def __str__(self):
        return f"sq({self.inner})"


_ATOM = re.compile(r"^(cum|cumlag|sq)\((.+)\)$")


def _parse_term(text: str) -> Term:
    text = text.strip()
    if not text:
        raise SpecError("empty term")
    if "*" in text:
        parts = [p for p in text.split("*")]
        term = _parse_term(parts[0])
        for part in parts[1:]:
            term = Product(term, _parse_term(part))
        return term
    if text == "1":
        return Intercept()
    if text == "t":
        return Time()
    m = _ATOM.match(text)
    if m:
        op, arg = m.groups()
        if op == "sq":
            return Square(_parse_term(arg))
        name = arg.strip()
        if not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", name):
            raise SpecError(f"bad column name in {text!r}")
        return CumSum(name, 0 if op == "cum" else 1)
    if re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", text):
        return Column(text)
    raise SpecError(f"cannot parse term {text!r}")


@dataclass(frozen=True)
class TermList:
    """Ordered model terms; the first is always the intercept."""

    terms: tuple

    def __post_init__(self):
        if not self.terms or not isinstance(self.terms[0], Intercept):
            raise SpecError("the first term of a TermList must be the intercept")

    @classmethod
    def parse(cls, text: str) -> "TermList":
        """Parse ``"1 + t + cum(x) + cumlag(l) + x*l + sq(age)"``.

        The intercept is prepended when absent.
        """
        terms = [_parse_term(p) for p in text.split("+")]
        if not isinstance(terms[0], Intercept):
            terms = [Intercept(), *[t for t in terms if not isinstance(t, Intercept)]]
        return cls(tuple(terms))

    def __len__(self):
        return len(self.terms)

    def __iter__(self):
        return iter(self.terms)

    def __str__(self):
        return " + ".join(str(t) for t in self.terms)

    def columns(self) -> set:
        out = set()
        for t in self.terms:
            out |= t.columns()
        return out

    def labels(self) -> list:
        return [str(t) for t in self.terms]


# ---------------------------------------------------------------------------
# History views used by term evaluation
# ---------------------------------------------------------------------------


class RowView:
    """Term-evaluation view over panel rows, optionally with exposure set by a regime."""

    def __init__(self, panel: Panel, rows: np.ndarray, regime: "Regime | None" = None):
        self.panel = panel
        self.rows = rows
        self.regime = regime

    def ones(self):
        return np.ones(self.rows.shape[0])

    def time(self):
        return self.panel.time[self.rows].astype(np.float64)

    def value(self, name):
        if name == EXPOSURE and self.regime is not None:
            return np.full(self.rows.shape[0], float(self.regime.g))
        return self.panel.column(name)[self.rows]

    def cum(self, name, lag):
        if name == EXPOSURE and self.regime is not None:
            t = self.panel.time[self.rows].astype(np.float64)
            return float(self.regime.g) * (t + 1.0 - lag)
        total = self.panel.cumsum(name)[self.rows]
        if lag == 1:
            return total - self.panel.column(name)[self.rows]
        return total


def evaluate_terms(terms: TermList, view) -> np.ndarray:
    cols = [np.broadcast_to(t.evaluate(view), view.ones().shape) for t in terms]
    return np.stack(cols, axis=-1).astype(np.float64, copy=False)


def build_design(panel: Panel, terms: TermList, time: int, regime_override: "Regime | None" = None) -> np.ndarray:
    """Design matrix for the subjects at risk at ``time`` (one row per subject)."""
    if time < 0 or time > panel.horizon:
        raise PanelError(f"time {time} outside 0..{panel.horizon}")
    for name in terms.columns():
        if not panel.has_column(name) or name == OUTCOME:
            raise PanelError(f"unknown column {name!r}")
    return evaluate_terms(terms, RowView(panel, panel.rows_at(time), regime_override))


def pooled_design(panel: Panel, terms: TermList, times: Iterable[int], response: str):
    """Stack the rows at ``times`` into ``(rows, design, response)`` for a pooled fit."""
    times = np.asarray(sorted(set(times)), dtype=np.int64)
    rows = np.flatnonzero(np.isin(panel.time, times))
    for name in terms.columns():
        if not panel.has_column(name) or name == OUTCOME:
            raise PanelError(f"unknown column {name!r}")
    design = evaluate_terms(terms, RowView(panel, rows))
    return rows, design, panel.column(response)[rows]


# ---------------------------------------------------------------------------
# Models, priors, regimes
# ---------------------------------------------------------------------------

BERNOULLI = "bernoulli"
GAUSSIAN = "gaussian"
FAMILIES = (BERNOULLI, GAUSSIAN)


@dataclass(frozen=True)
class OutcomeModel:
    terms: TermList
    family: str = BERNOULLI
    times: tuple | None = None  # None: every time 0..k
    coefficients: np.ndarray | None = None
    sigma: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise SpecError(f"unknown family {self.family!r}")


@dataclass(frozen=True)
class CovariateModel:
    name: str
    terms: TermList
    family: str = BERNOULLI
    times: tuple | None = None  # None: every time 1..k
    coefficients: np.ndarray | None = None
    sigma: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise SpecError(f"unknown family {self.family!r}")
        if self.name in RESERVED:
            raise SpecError(f"cannot model reserved column {self.name!r} as a covariate")
        if self.times is not None and min(self.times, default=1) < 1:
            raise SpecError("baseline covariates come from the data; covariate models start at t=1")


@dataclass(frozen=True)
class ExposureModel:
    """Exposure model housed for completeness; static regimes never fit it."""

    terms: TermList
    coefficients: np.ndarray | None = None
    fitted: bool = False


@dataclass(frozen=True)
class ModelSpec:
    outcome: OutcomeModel
    covariates: tuple = ()
    exposure: ExposureModel | None = None

    def __post_init__(self):
        check_future_references(self)
        if self.exposure is not None and self.exposure.fitted:
            raise SpecError("the exposure model is never fitted for static regimes")

    def outcome_times(self, horizon: int) -> tuple:
        return tuple(range(horizon + 1)) if self.outcome.times is None else tuple(sorted(self.outcome.times))

    def covariate_times(self, model: CovariateModel, horizon: int) -> tuple:
        return tuple(range(1, horizon + 1)) if model.times is None else tuple(sorted(model.times))

    def blocks(self) -> list:
        """Models in sampling order: the outcome model, then each covariate model."""
        return [self.outcome, *self.covariates]

    def with_coefficients(self, coefs: Sequence[np.ndarray], sigmas: Sequence | None = None) -> "ModelSpec":
        blocks = self.blocks()
        if len(coefs) != len(blocks):
            raise SpecError("one coefficient vector per model block is required")
        sigmas = list(sigmas) if sigmas is not None else [None] * len(blocks)
        new = [replace(b, coefficients=np.asarray(c, dtype=np.float64), sigma=s)
               for b, c, s in zip(blocks, coefs, sigmas)]
        return replace(self, outcome=new[0], covariates=tuple(new[1:]))


def check_future_references(spec: ModelSpec) -> None:
    """Reject covariate models that use a value not yet generated at time t.

    Within a time point the order is: covariates in model order, then exposure,
    then outcome. A covariate model may use the current value of earlier
    covariates only; exposure, its own column and later covariates need cumlag().
    """
    names = [m.name for m in spec.covariates]
    for term in spec.outcome.terms:
        if OUTCOME in term.columns():
            raise SpecError("the outcome model cannot reference the outcome")
    for i, m in enumerate(spec.covariates):
        if any(OUTCOME in t.columns() for t in m.terms):
            raise SpecError(f"model for {m.name!r} references the outcome")
        future = {EXPOSURE, m.name, *names[i + 1:]}
        for col in _current_refs(m.terms):
            if col in future:
                raise SpecError(f"model for {m.name!r} references future value of {col!r}; use cumlag()")


def _current_refs(terms) -> set:
    out = set()

    def walk(t):
        if isinstance(t, Column) or (isinstance(t, CumSum) and t.lag == 0):
            out.add(t.name)
        elif isinstance(t, Product):
            walk(t.left)
            walk(t.right)
        elif isinstance(t, Square):
            walk(t.inner)

    for t in terms:
        walk(t)
    return out


@dataclass(frozen=True)
class Normal:
    mean: float = 0.0
    variance: float = 1.0

    def __post_init__(self):
        if not self.variance > 0:
            raise SpecError("Normal prior variance must be positive")


@dataclass(frozen=True)
class DoubleExponential:
    mean: float = 0.0
    rate: float = 1.0

    def __post_init__(self):
        if not self.rate > 0:
            raise SpecError("double-exponential rate must be positive")


@dataclass(frozen=True)
class Flat:
    pass


@dataclass(frozen=True)
class Fixed:
    """Scale "prior" that pins a Gaussian block's sigma at ``value`` (known-variance models)."""

    value: float = 1.0

    def __post_init__(self):
        if not self.value > 0:
            raise SpecError("a fixed sigma must be positive")


@dataclass(frozen=True)
class PriorSpec:
    """Per-coefficient priors keyed by block ("y" for the outcome, else the covariate name).

    A missing block means flat priors. ``scale`` applies to log(sigma) of
    Gaussian blocks and defaults to flat.
    """

    blocks: Mapping[str, tuple] = field(default_factory=dict)
    scale: object = Flat()

    def for_block(self, key: str, n_coef: int) -> tuple:
        entries = tuple(self.blocks.get(key, ()))
        if not entries:
            return (Flat(),) * n_coef
        if len(entries) != n_coef:
            raise SpecError(f"block {key!r} has {n_coef} coefficients but {len(entries)} priors")
        return entries

    @classmethod
    def intercept_and_slopes(cls, spec: ModelSpec, intercept, slope, scale=Flat()) -> "PriorSpec":
        """Same prior for every intercept and another for every other coefficient."""
        blocks = {}
        for key, model in block_items(spec):
            blocks[key] = (intercept,) + (slope,) * (len(model.terms) - 1)
        return cls(blocks, scale)

    @classmethod
    def flat(cls) -> "PriorSpec":
        return cls({})


def default_priors(spec: ModelSpec) -> PriorSpec:
    """Vague N(log 0.5, 1000) intercepts, N(0, 3) for every other coefficient."""
    return PriorSpec.intercept_and_slopes(spec, Normal(math.log(0.5), 1000.0), Normal(0.0, 3.0))


def block_items(spec: ModelSpec) -> list:
    return [(OUTCOME, spec.outcome)] + [(m.name, m) for m in spec.covariates]


@dataclass(frozen=True)
class Regime:
    """Static intervention setting exposure to ``g`` at every time."""

    g: int
    name: str = ""

    def __post_init__(self):
        if self.g not in (0, 1):
            raise SpecError("static regimes set exposure to 0 or 1")
        if not self.name:
            object.__setattr__(self, "name", "always" if self.g == 1 else "never")


ALWAYS = Regime(1, "always")
NEVER = Regime(0, "never")


def parse_regime(text: str) -> Regime:
    text = text.strip().lower()
    if text in ("always", "1"):
        return ALWAYS
    if text in ("never", "0"):
        return NEVER
    raise SpecError(f"unknown regime {text!r}; expected always/never")


@dataclass(frozen=True)
class EffectEstimate:
    point: float
    se: float
    ci_low: float
    ci_high: float
    ci_method: str = "wald"
    draws: np.ndarray | None = field(default=None, repr=False, compare=False)


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------


def read_panel_csv(path, binary: Iterable[str] | None = None) -> Panel:
    """Load a long-format CSV with header ``id,time,y,x,<covariates>``.

    Leading ``#`` lines are metadata; a ``# binary=a,b`` line declares binary
    columns. Explicit ``binary`` overrides it. ``y`` and ``x`` default to binary.
    """
    meta_binary = None
    with open(path, newline="", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            m = re.match(r"#\s*binary\s*=\s*(.*)$", line)
            if m:
                meta_binary = {s.strip() for s in m.group(1).split(",") if s.strip()}
        elif line.strip():
            body.append(line)
    reader = csv.reader(body)
    header = next(reader)
    if header[:4] != ["id", "time", "y", "x"]:
        raise PanelError("panel CSV must start with columns id,time,y,x")
    data = [row for row in reader]
    if not data:
        raise PanelError("panel CSV has no rows")
    cols = list(zip(*data))
    try:
        ids = np.array([int(v) for v in cols[0]])
        time = np.array([int(v) for v in cols[1]])
        values = [np.array([float(v) if v != "" else np.nan for v in c]) for c in cols[2:]]
    except ValueError as exc:
        raise PanelError(f"malformed value in {path}: {exc}") from None
    covs = dict(zip(header[4:], values[2:]))
    if binary is None:
        binary = meta_binary if meta_binary is not None else {"y", "x"}
    return Panel.from_columns(ids, time, values[0], values[1], covs, set(binary))


def _fmt(v: float) -> str:
    if float(v).is_integer():
        return str(int(v))
    return repr(float(v))


def write_panel_csv(panel: Panel, path, metadata: Mapping | None = None) -> None:
    names = list(panel.covariates)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for k, v in (metadata or {}).items():
            fh.write(f"# {k}={v}\n")
        fh.write(f"# binary={','.join(sorted(panel.binary))}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "time", "y", "x", *names])
        for r in range(panel.n_rows):
            w.writerow([int(panel.ids[r]), int(panel.time[r]), _fmt(panel.y[r]), _fmt(panel.x[r]),
                        *(_fmt(panel.covariates[n][r]) for n in names)])
