"""Synthetic data generators.

Three levels of fidelity are provided:

* :func:`simulate_counts` draws each cell directly from its Poisson law.
* :func:`simulate_visits` sums per-visit Bernoulli detections of
  individuals, so the Poisson law only holds approximately.
* :func:`simulate_ipp` samples individuals from an inhomogeneous Poisson
  point process on rectangular sites (by thinning against a bound) and
  retains each one independently per dataset.

:func:`simulate_survey` builds the full synthetic study used by the
validation protocol: a standardized survey recorded at the point-year
level, an opportunistic dataset with heterogeneous unknown effort, and
an independent reference survey.

Every generator is driven by :func:`make_rng`, a PCG64 stream keyed by
the base seed and the replicate index, so results do not depend on the
order in which replicates are run.
"""

from __future__ import annotations

import ast
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .model import OPP, STD, CountTable, EffortSpec, IndexSpace, ParameterSet, PointYearCounts

Field = Callable[[np.ndarray, np.ndarray], np.ndarray]


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator for ``seed`` and an optional stream key (e.g. replicate index)."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, stream)])))


def simulate_counts(params: ParameterSet, seed: int, replicate: int = 0, space: IndexSpace | None = None) -> CountTable:
    """Independent Poisson draws with mean ``N~ * E~ * P~`` per cell."""
    rng = make_rng(seed, replicate)
    lam = params.intensities()
    counts = rng.poisson(lam)
    I, J = params.shape
    space = space or IndexSpace.default(I, J)
    mon = np.ones((I, 2), dtype=bool)
    mon[:, STD] = params.monitored0
    return CountTable(space, counts, mon)


# ----------------------------------------------------------------------
# visit-level counting
# ----------------------------------------------------------------------

IndividualP = Callable[[np.random.Generator, np.ndarray, int], np.ndarray]


def beta_heterogeneity(concentration: float) -> IndividualP:
    """Per-individual detection probabilities ``Beta(c * p, c * (1 - p))`` with mean ``p``.

    Each individual keeps its draw for every visit.
    """
    c = float(concentration)
    if c <= 0:
        raise ValueError("concentration must be positive")

    def draw(rng, p_bar, size):
        p_bar = np.clip(np.asarray(p_bar, dtype=float), 1e-12, 1 - 1e-12)
        base = rng.random(size)[:, None]
        # one latent quantile per individual, mapped through each visit's Beta
        return stats.beta.ppf(base, c * p_bar[None, :], c * (1 - p_bar[None, :]))

    return draw


def visit_counts(
    rng: np.random.Generator,
    n_individuals: int,
    p_visits,
    individual_p: IndividualP | None = None,
) -> int:
    """Number of (individual, visit) detections at one site.

    Each individual is counted at most once per visit but may be counted
    on several visits.
    """
    p = np.asarray(p_visits, dtype=float)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("detection probabilities must lie in [0, 1]")
    n = int(n_individuals)
    if n < 0:
        raise ValueError("abundance must be a non-negative integer")
    if n == 0 or p.size == 0:
        return 0
    if individual_p is None:
        return int(rng.binomial(n, p).sum())
    probs = np.asarray(individual_p(rng, p, n))
    return int(np.count_nonzero(rng.random(probs.shape) < probs))


@dataclass(frozen=True, eq=False)
class VisitScenario:
    """Individuals and visits at the survey level.

    ``abundance`` is the integer (I, J) matrix of individuals present;
    ``visits[k][j]`` is an (I, V_jk) array of mean per-visit detection
    probabilities for dataset ``k`` at site ``j``.
    """

    abundance: np.ndarray
    visits: Sequence[Sequence[np.ndarray]]
    monitored: np.ndarray | None = None
    individual_p: IndividualP | None = None

    def __post_init__(self):
        a = np.asarray(self.abundance)
        if a.ndim != 2 or np.any(a < 0) or np.any(np.round(a) != a):
            raise ValueError("abundance must be a non-negative integer matrix")
        I, J = a.shape
        if len(self.visits) != 2 or any(len(v) != J for v in self.visits):
            raise ValueError("visits must be given per dataset and per site")
        for vk in self.visits:
            for pj in vk:
                pj = np.asarray(pj, dtype=float)
                if pj.ndim != 2 or pj.shape[0] != I:
                    raise ValueError("each visit block must be an (I, V) array")
                if np.any((pj < 0) | (pj > 1)):
                    raise ValueError("probabilities must lie in [0, 1]")

    def expected(self) -> np.ndarray:
        """Poisson-approximation means ``N[i, j] * sum_v p[i, v]``, shape (I, J, 2)."""
        a = np.asarray(self.abundance, dtype=float)
        out = np.zeros(a.shape + (2,))
        for k in (STD, OPP):
            for j, pj in enumerate(self.visits[k]):
                out[:, j, k] = a[:, j] * np.asarray(pj, dtype=float).sum(axis=1)
        return out

    def le_cam_bound(self) -> np.ndarray:
        """``sum_v sum_a p**2`` per cell, with individuals at their mean probability."""
        a = np.asarray(self.abundance, dtype=float)
        out = np.zeros(a.shape + (2,))
        for k in (STD, OPP):
            for j, pj in enumerate(self.visits[k]):
                out[:, j, k] = a[:, j] * (np.asarray(pj, dtype=float) ** 2).sum(axis=1)
        return out


def simulate_visits(scenario: VisitScenario, seed: int, replicate: int = 0, space: IndexSpace | None = None) -> CountTable:
    """Counts as sums of independent per-visit detections of each individual."""
    rng = make_rng(seed, replicate)
    a = np.asarray(scenario.abundance, dtype=np.int64)
    I, J = a.shape
    counts = np.zeros((I, J, 2), dtype=np.int64)
    mon = np.ones((I, 2), dtype=bool) if scenario.monitored is None else np.asarray(scenario.monitored, dtype=bool)
    for k in (STD, OPP):
        for j in range(J):
            pj = np.asarray(scenario.visits[k][j], dtype=float)
            for i in range(I):
                if mon[i, k]:
                    counts[i, j, k] = visit_counts(rng, a[i, j], pj[i], scenario.individual_p)
    return CountTable(space or IndexSpace.default(I, J), counts, mon)


def total_variation_to_poisson(samples, mean: float) -> float:
    """Total variation distance between the empirical law of ``samples`` and Poisson(``mean``)."""
    x = np.asarray(samples, dtype=np.int64)
    if x.size == 0:
        raise ValueError("no samples")
    top = int(x.max())
    emp = np.bincount(x, minlength=top + 1) / x.size
    pmf = stats.poisson.pmf(np.arange(top + 1), mean)
    tail = stats.poisson.sf(top, mean)
    return float(0.5 * (np.abs(emp - pmf).sum() + tail))


@dataclass(frozen=True)
class LeCamReport:
    tv_distance: float
    bound: float
    poisson_mean: float
    sample_mean: float
    sample_variance: float
    replicates: int


def le_cam_check(
    n_individuals: int,
    p_visits,
    replicates: int,
    seed: int,
    individual_p: IndividualP | None = None,
) -> LeCamReport:
    """Compare visit-level counts at one site with their Poisson approximation.

    The bound is ``sum_v N * p_v**2``, the quantity whose smallness
    justifies the approximation.
    """
    p = np.asarray(p_visits, dtype=float)
    rng = make_rng(seed)
    if individual_p is None:
        # same law as visit_counts, drawn for all replicates at once
        x = rng.binomial(int(n_individuals), p, size=(replicates, p.size)).sum(axis=1)
    else:
        x = np.array([visit_counts(rng, n_individuals, p, individual_p) for _ in range(replicates)])
    mean = float(n_individuals * p.sum())
    return LeCamReport(
        tv_distance=total_variation_to_poisson(x, mean),
        bound=float(n_individuals * np.sum(p**2)),
        poisson_mean=mean,
        sample_mean=float(x.mean()),
        sample_variance=float(x.var(ddof=1)),
        replicates=int(replicates),
    )


# ----------------------------------------------------------------------
# thinned inhomogeneous Poisson process
# ----------------------------------------------------------------------

_FUNCS = {
    name: getattr(np, name)
    for name in ("exp", "log", "sqrt", "sin", "cos", "tan", "abs", "minimum", "maximum", "where", "floor", "ceil", "clip", "tanh", "hypot")
}
_CONSTS = {"pi": math.pi, "e": math.e}
_ALLOWED_NODES = (
    ast.Expression, ast.BinOp, ast.UnaryOp, ast.Constant, ast.Name, ast.Load, ast.Call,
    ast.Compare, ast.BoolOp, ast.IfExp,
    ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.Mod, ast.FloorDiv, ast.USub, ast.UAdd,
    ast.Lt, ast.LtE, ast.Gt, ast.GtE, ast.Eq, ast.NotEq, ast.And, ast.Or,
    ast.BitAnd, ast.BitOr, ast.Invert,
)


def compile_field(expr: str) -> Field:
    """Turn an arithmetic expression in ``x`` and ``y`` into a vectorized function.

    Only numbers, ``x``, ``y``, ``pi``, ``e``, arithmetic, comparisons and a
    fixed set of numpy functions (``exp``, ``where``, ``minimum``, ...) are
    accepted.  Comparisons combined with ``&``/``|`` give habitat-style
    step functions, e.g. ``where((x < 0.5) & (y < 0.5), 2.0, 1.0)``.
    """
    tree = ast.parse(expr, mode="eval")
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED_NODES):
            raise ValueError(f"unsupported syntax in field expression: {type(node).__name__}")
        if isinstance(node, ast.Name) and node.id not in {"x", "y", *_FUNCS, *_CONSTS}:
            raise ValueError(f"unknown name {node.id!r} in field expression")
        if isinstance(node, ast.Call) and not (isinstance(node.func, ast.Name) and node.func.id in _FUNCS):
            raise ValueError("only whitelisted functions may be called")
        if isinstance(node, ast.Constant) and not isinstance(node.value, (int, float)):
            raise ValueError("only numeric constants are allowed")
    code = compile(tree, "<field>", "eval")

    def f(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        out = eval(code, {"__builtins__": {}}, {**_FUNCS, **_CONSTS, "x": x, "y": y})
        return np.broadcast_to(np.asarray(out, dtype=float), np.broadcast(x, y).shape)

    f.expression = expr
    return f


def step_field(habitat: Field, values: dict) -> Field:
    """Piecewise-constant field taking ``values[h]`` where ``habitat(x, y) == h``."""

    def f(x, y):
        h = np.asarray(habitat(x, y))
        out = np.full(h.shape, np.nan)
        for key, v in values.items():
            out[h == key] = v
        if np.any(np.isnan(out)):
            raise ValueError("habitat label without a value")
        return out

    return f


@dataclass(frozen=True)
class Rect:
    x0: float
    x1: float
    y0: float
    y1: float

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError("degenerate site rectangle")

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)


@dataclass(frozen=True, eq=False)
class SpatialScenario:
    """Species intensities and per-dataset retention over rectangular sites.

    ``intensity[i]`` is ``lambda_i(x, y)``; ``bound[i]`` must dominate it on
    every site.  ``retention[k][i]`` is ``b_ik(x, y)`` with values in [0, 1].
    """

    sites: Sequence[Rect]
    intensity: Sequence[Field]
    bound: Sequence[float]
    retention: Sequence[Sequence[Field]]

    def __post_init__(self):
        I = len(self.intensity)
        if len(self.bound) != I or len(self.retention) != 2 or any(len(r) != I for r in self.retention):
            raise ValueError("one intensity, bound and retention pair per species required")
        if any(not (b > 0 and np.isfinite(b)) for b in self.bound):
            raise ValueError("intensity bounds must be positive and finite")


class BoundViolation(ValueError):
    pass


def simulate_ipp(scenario: SpatialScenario, seed: int, replicate: int = 0, space: IndexSpace | None = None):
    """Sample thinned Poisson processes and aggregate retained points per site.

    Returns ``(points, counts)`` where ``points[(i, j, k)]`` is an (n, 2)
    array of the individuals of species ``i`` in site ``j`` recorded in
    dataset ``k``.
    """
    rng = make_rng(seed, replicate)
    I, J = len(scenario.intensity), len(scenario.sites)
    counts = np.zeros((I, J, 2), dtype=np.int64)
    points = {}
    for i in range(I):
        lam, bound = scenario.intensity[i], float(scenario.bound[i])
        for j, rect in enumerate(scenario.sites):
            n = rng.poisson(bound * rect.area)
            xs = rng.uniform(rect.x0, rect.x1, n)
            ys = rng.uniform(rect.y0, rect.y1, n)
            val = np.asarray(lam(xs, ys), dtype=float)
            if np.any(~np.isfinite(val)) or np.any(val < 0):
                raise ValueError(f"intensity of species {i} is not finite and non-negative")
            if np.any(val > bound * (1 + 1e-12)):
                raise BoundViolation(f"intensity of species {i} exceeds its bound {bound} in site {j}")
            keep = rng.random(n) * bound < val
            xs, ys = xs[keep], ys[keep]
            for k in (STD, OPP):
                b = np.asarray(scenario.retention[k][i](xs, ys), dtype=float)
                if np.any((b < 0) | (b > 1)):
                    raise ValueError("retention probabilities must lie in [0, 1]")
                rec = rng.random(xs.size) < b
                points[(i, j, k)] = np.column_stack([xs[rec], ys[rec]])
                counts[i, j, k] = int(rec.sum())
    mon = np.ones((I, 2), dtype=bool)
    return points, CountTable(space or IndexSpace.default(I, J), counts, mon)


# ----------------------------------------------------------------------
# end-to-end synthetic survey
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class SurveyScenario:
    """Settings of the synthetic study used for predictive-power checks.

    Abundances are log-normal with a species effect and an independent
    site effect.  The standardized survey visits ``n_points`` listening
    points per site over ``n_years`` years, each point-year being
    surveyed with probability ``survey_prob``.  The opportunistic effort
    is log-normal across sites and unrelated to site area.  The
    reference survey covers the first ``n_reference_sites`` sites.
    """

    n_species: int = 30
    n_sites: int = 50
    n_unmonitored: int = 10
    n_reference_sites: int = 30
    species_log_sd: float = 1.0
    site_log_sd: float = 0.8
    detect_log_sd: float = 0.4
    n_points: int = 5
    n_years: int = 4
    survey_prob: float = 0.88
    std_rate: float = 0.15
    opp_rate: float = 5.0
    opp_effort_log_sd: float = 1.0
    ref_points: tuple[int, int] = (5, 15)
    ref_rate: float = 0.5
    area_range: tuple[float, float] = (0.5, 1.5)

    def __post_init__(self):
        if not 0 <= self.n_unmonitored < self.n_species:
            raise ValueError("at least one species must be monitored in the standardized survey")
        if not 3 <= self.n_reference_sites <= self.n_sites:
            raise ValueError("reference survey needs between 3 and n_sites sites")


@dataclass(frozen=True, eq=False)
class SyntheticSurvey:
    truth: np.ndarray
    counts: CountTable
    effort: EffortSpec
    reference_counts: np.ndarray
    reference_points: np.ndarray
    reference_sites: np.ndarray
    detect: np.ndarray = field(repr=False)
    opp_effort: np.ndarray = field(repr=False)


def simulate_survey(scenario: SurveyScenario, seed: int, replicate: int = 0) -> SyntheticSurvey:
    rng = make_rng(seed, replicate)
    I, J = scenario.n_species, scenario.n_sites
    species_eff = rng.normal(0.0, scenario.species_log_sd, I)
    site_eff = rng.normal(0.0, scenario.site_log_sd, (I, J))
    truth = np.exp(species_eff[:, None] + site_eff)
    detect = np.exp(rng.normal(0.0, scenario.detect_log_sd, (I, 3)))
    mon0 = np.ones(I, dtype=bool)
    mon0[I - scenario.n_unmonitored :] = False
    detect[~mon0, 0] = 0.0

    # standardized survey at the point-year level
    sites, pids, years, rows = [], [], [], []
    for j in range(J):
        surveyed = rng.random((scenario.n_points, scenario.n_years)) < scenario.survey_prob
        if not surveyed.any():
            surveyed[rng.integers(scenario.n_points), rng.integers(scenario.n_years)] = True
        lam = scenario.std_rate * truth[:, j] * detect[:, 0]
        for pt, yr in zip(*np.nonzero(surveyed)):
            sites.append(j)
            pids.append(f"s{j + 1}p{pt + 1}")
            years.append(str(2008 + yr))
            rows.append(rng.poisson(lam))
    prov = PointYearCounts(np.array(sites), tuple(pids), tuple(years), np.array(rows))
    points0 = prov.point_years_per_site(J).astype(float)
    x0 = prov.site_totals(J)

    opp_effort = scenario.opp_rate * np.exp(rng.normal(0.0, scenario.opp_effort_log_sd, J))
    x1 = rng.poisson(truth * opp_effort[None, :] * detect[:, [1]])
    area = rng.uniform(*scenario.area_range, J)

    ref_sites = np.zeros(J, dtype=bool)
    ref_sites[: scenario.n_reference_sites] = True
    ref_points = np.zeros(J)
    lo, hi = scenario.ref_points
    ref_points[ref_sites] = rng.integers(lo, hi + 1, scenario.n_reference_sites)
    xs = rng.poisson(scenario.ref_rate * truth * ref_points[None, :] * detect[:, [2]])

    mon = np.ones((I, 2), dtype=bool)
    mon[:, STD] = mon0
    space = IndexSpace.default(I, J)
    counts = CountTable(space, np.stack([x0, x1], axis=-1), mon, provenance=prov)
    effort = EffortSpec(points0, site_area=area, points0=points0)
    return SyntheticSurvey(truth, counts, effort, xs, ref_points, ref_sites, detect, opp_effort)
