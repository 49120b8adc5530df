"""Predictive-power comparison of abundance estimators.

Each estimate is standardized per species (rows sum to one over the
sites kept for the comparison) and correlated with a reference estimate
built from an independent survey.  Medians and interquartile ranges of
the per-species Pearson coefficients summarize each species group.
Quantiles use linear interpolation between order statistics
(``numpy.quantile(..., method="linear")``).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .estimators import AbundanceEstimate, baseline_area, baseline_standardized, baseline_totalcount
from .glm import EstimationError, FitOptions, build_design, fit
from .model import OPP, STD, CountTable, EffortSpec, IndexSpace, PointYearCounts, standardize_abundance
from .simulate import SurveyScenario, SyntheticSurvey, make_rng, simulate_survey


class UndefinedCorrelation(ValueError):
    pass


def pearson(x, y) -> float:
    """Product-moment correlation of two vectors of equal length (at least 3)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be vectors of equal length")
    if x.size < 3:
        raise UndefinedCorrelation("fewer than 3 observations")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelation("constant vector")
    r = float(dx @ dy) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))


@dataclass(frozen=True)
class GroupSummary:
    median: float
    q25: float
    q75: float
    n_species: int

    @property
    def iqr(self) -> tuple[float, float]:
        return (self.q25, self.q75)


@dataclass(frozen=True, eq=False)
class PowerReport:
    """Per-species correlations with the reference and their group summaries.

    ``excluded`` maps species label to the reason it has no coefficient;
    ``sites_used`` is the boolean mask of sites entering every correlation.
    """

    method_tag: str
    per_species_r: dict
    group_summaries: dict
    excluded: dict
    sites_used: np.ndarray = field(repr=False)

    def median(self, group: str) -> float:
        return self.group_summaries[group].median


def summarize(values) -> GroupSummary:
    v = np.asarray(list(values), dtype=float)
    if v.size == 0:
        return GroupSummary(float("nan"), float("nan"), float("nan"), 0)
    q25, med, q75 = np.quantile(v, [0.25, 0.5, 0.75], method="linear")
    return GroupSummary(float(med), float(q25), float(q75), int(v.size))


def predictive_power(
    candidate: AbundanceEstimate,
    reference: AbundanceEstimate,
    groups: Mapping[str, Sequence[int]],
    species_labels: Sequence[str] | None = None,
) -> PowerReport:
    """Correlate a candidate with the reference, species by species.

    Only sites retained by both estimates are used.  A species is left
    out, with the reason recorded, when either standardized row is all
    zero or constant, or when fewer than three sites remain.
    """
    a = np.asarray(candidate.values)
    b = np.asarray(reference.values)
    if a.shape != b.shape:
        raise ValueError("candidate and reference cover different species or sites")
    I = a.shape[0]
    labels = list(species_labels) if species_labels is not None else [str(i) for i in range(I)]
    sites = candidate.site_mask & reference.site_mask
    excluded: dict = {}
    per_species: dict = {}
    if sites.sum() < 3:
        for lab in labels:
            excluded[lab] = "fewer than 3 common sites"
    else:
        sa, za = standardize_abundance(a[:, sites])
        sb, zb = standardize_abundance(b[:, sites])
        for i, lab in enumerate(labels):
            if za[i]:
                excluded[lab] = "candidate estimate is zero at every common site"
                continue
            if zb[i]:
                excluded[lab] = "reference estimate is zero at every common site"
                continue
            try:
                per_species[lab] = pearson(sa[i], sb[i])
            except UndefinedCorrelation as exc:
                excluded[lab] = str(exc)
    summaries = {}
    for name, members in groups.items():
        vals = [per_species[labels[i]] for i in members if labels[i] in per_species]
        summaries[name] = summarize(vals)
    return PowerReport(candidate.method_tag, per_species, summaries, excluded, sites)


def log_between_site_variance(abund) -> tuple[np.ndarray, np.ndarray]:
    """Variance across sites of the log standardized abundance, per species.

    Zero cells are dropped; the second output counts them per species.
    Species with fewer than two positive cells get NaN.
    """
    std, _ = standardize_abundance(abund)
    out = np.full(std.shape[0], np.nan)
    zeros = (std <= 0).sum(axis=1)
    for i, row in enumerate(std):
        pos = row[row > 0]
        if pos.size >= 2:
            out[i] = float(np.var(np.log(pos), ddof=1))
    return out, zeros


# ----------------------------------------------------------------------
# effort subsampling
# ----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SubsampleResult:
    counts: CountTable
    effort: EffortSpec
    reduction_factor: float
    point_years_before: int
    point_years_after: int


# keeps subsampling draws apart from the survey simulated with the same seed
_SUBSAMPLE_STREAM = 1


def subsample_effort(counts: CountTable, seed: int, replicate: int = 0, effort: EffortSpec | None = None) -> SubsampleResult:
    """Keep one listening point per site and one of that point's years.

    The point is drawn uniformly among the site's points, then the year
    uniformly among the years in which that point was surveyed.  The new
    standardized effort is one point-year everywhere; site areas carry
    over from ``effort`` when given.
    """
    prov = counts.provenance
    if prov is None:
        raise ValueError("subsampling needs point-year provenance")
    J = counts.space.n_sites
    rng = make_rng(seed, replicate, _SUBSAMPLE_STREAM)
    keep = []
    for j in range(J):
        rows = np.flatnonzero(prov.site == j)
        if rows.size == 0:
            raise ValueError(f"site {counts.space.sites[j]!r} has no point-years")
        points = sorted({prov.point_id[r] for r in rows})
        pt = points[rng.integers(len(points))]
        cand = [r for r in rows if prov.point_id[r] == pt]
        cand.sort(key=lambda r: prov.year[r])
        keep.append(cand[rng.integers(len(cand))])
    keep = np.array(keep)
    sub = PointYearCounts(prov.site[keep], tuple(prov.point_id[r] for r in keep), tuple(prov.year[r] for r in keep), prov.counts[keep])
    x0 = sub.site_totals(J)
    new_counts = counts.with_standardized(x0, provenance=sub)
    area = effort.site_area if effort is not None else None
    ones = np.ones(J)
    return SubsampleResult(
        counts=new_counts,
        effort=EffortSpec(ones, site_area=area, points0=ones),
        reduction_factor=len(prov) / len(sub),
        point_years_before=len(prov),
        point_years_after=len(sub),
    )


# ----------------------------------------------------------------------
# end-to-end synthetic study
# ----------------------------------------------------------------------


def combined_estimate(counts: CountTable, effort: EffortSpec, options: FitOptions | None = None) -> AbundanceEstimate:
    """GLM fit of both datasets with standardized detectabilities estimated.

    Sites without any standardized count carry no information on
    abundance; they are left out of the fit and listed in
    ``excluded_sites``.  The reference species is the one with the
    largest standardized total, so that sparse standardized data still
    pin its detectability.
    """
    keep = counts.column_sums(STD) > 0
    if not keep.all():
        space = IndexSpace(counts.space.species, [s for s, k in zip(counts.space.sites, keep) if k])
        sub = CountTable(space, counts.counts[:, keep], counts.monitored)
        sub_effort = EffortSpec(effort.effort0[keep])
    else:
        sub, sub_effort = counts, effort
    x0 = np.where(sub.monitored[:, STD] & sub.monitored[:, OPP], sub.dataset(STD).sum(axis=1), -1)
    design = build_design(sub, sub_effort, reference=int(np.argmax(x0)))
    res = fit(design, sub, options or FitOptions(compute_cov=False))
    if not res.converged:
        raise EstimationError("combined fit did not converge")
    values = np.zeros(counts.dataset(STD).shape)
    values[:, keep] = res.n_tilde
    return AbundanceEstimate(
        "a+l",
        values,
        excluded_sites=frozenset(np.flatnonzero(~keep).tolist()),
        diagnostics={"iterations": res.iterations},
    )


def reference_estimate(survey: SyntheticSurvey) -> AbundanceEstimate:
    sites = survey.reference_sites
    values = np.zeros(survey.reference_counts.shape)
    values[:, sites] = survey.reference_counts[:, sites] / survey.reference_points[sites]
    return AbundanceEstimate("s", values, excluded_sites=frozenset(np.flatnonzero(~sites).tolist()))


def estimate_all(survey: SyntheticSurvey) -> dict[str, AbundanceEstimate]:
    counts, effort = survey.counts, survey.effort
    return {
        "a": baseline_standardized(counts.dataset(STD), effort.points0),
        "l1": baseline_area(counts.dataset(OPP), effort.site_area),
        "l2": baseline_totalcount(counts.dataset(OPP)),
        "a+l": combined_estimate(counts, effort),
    }


def species_groups(counts: CountTable) -> dict[str, list[int]]:
    mon0 = counts.monitored[:, STD]
    return {
        "all": list(range(counts.space.n_species)),
        "monitored0": np.flatnonzero(mon0).tolist(),
        "unmonitored0": np.flatnonzero(~mon0).tolist(),
    }


@dataclass(frozen=True, eq=False)
class ReplicateOutcome:
    reports: dict
    stability: PowerReport | None
    subsample_factor: float


def run_replicate(scenario: SurveyScenario, seed: int, replicate: int, with_subsample: bool = True) -> ReplicateOutcome:
    survey = simulate_survey(scenario, seed, replicate)
    ests = estimate_all(survey)
    ref = reference_estimate(survey)
    groups = species_groups(survey.counts)
    labels = survey.counts.space.species
    reports = {tag: predictive_power(est, ref, groups, labels) for tag, est in ests.items()}
    stability = None
    factor = float("nan")
    if with_subsample:
        sub = subsample_effort(survey.counts, seed, replicate, effort=survey.effort)
        reduced = combined_estimate(sub.counts, sub.effort)
        stability = predictive_power(reduced, ests["a+l"], groups, labels)
        factor = sub.reduction_factor
    return ReplicateOutcome(reports, stability, factor)


@dataclass(frozen=True, eq=False)
class ValidationStudy:
    """Group medians per replicate and how often the combined estimator wins.

    ``medians[tag][group]`` is an array over replicates; ``win_rate[tag]``
    is the fraction of replicates where the combined median beats method
    ``tag`` on the group used for that comparison.
    """

    medians: dict
    stability_medians: np.ndarray
    win_rate: dict
    comparison_group: dict
    subsample_factor: np.ndarray
    replicates: int


COMPARISON_GROUPS = {"a": "monitored0", "l1": "all", "l2": "all"}


def validation_study(
    scenario: SurveyScenario,
    replicates: int,
    seed: int,
    threads: int = 1,
    with_subsample: bool = True,
) -> ValidationStudy:
    def one(r):
        return run_replicate(scenario, seed, r, with_subsample)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(one, range(replicates)))
    else:
        outcomes = [one(r) for r in range(replicates)]
    tags = list(outcomes[0].reports)
    group_names = list(outcomes[0].reports[tags[0]].group_summaries)
    medians = {
        tag: {g: np.array([o.reports[tag].median(g) for o in outcomes]) for g in group_names}
        for tag in tags
    }
    win = {}
    for tag, g in COMPARISON_GROUPS.items():
        win[tag] = float(np.mean(medians["a+l"][g] > medians[tag][g]))
    stab = np.array([o.stability.median("all") if o.stability else np.nan for o in outcomes])
    return ValidationStudy(
        medians=medians,
        stability_medians=stab,
        win_rate=win,
        comparison_group=dict(COMPARISON_GROUPS),
        subsample_factor=np.array([o.subsample_factor for o in outcomes]),
        replicates=replicates,
    )
