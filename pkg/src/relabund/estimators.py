"""Closed-form and fixed-point maximum likelihood estimators, plus baselines.

All estimators return an :class:`AbundanceEstimate` whose ``values`` are
finite and non-negative.  Sites where an estimator is undefined (a zero
denominator) are zeroed and listed in ``excluded_sites`` so that
comparisons can drop them pairwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from .model import OPP, STD, CountTable, EffortSpec

METHOD_TAGS = ("a", "s", "l1", "l2", "a+l", "closed_form", "fixed_point")


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class AbundanceEstimate:
    method_tag: str
    values: np.ndarray
    excluded_sites: frozenset = frozenset()
    e1: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("abundance values must be finite and non-negative")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "excluded_sites", frozenset(int(j) for j in self.excluded_sites))

    @property
    def site_mask(self) -> np.ndarray:
        """True for sites where the estimate is defined."""
        m = np.ones(self.values.shape[1], dtype=bool)
        m[list(self.excluded_sites)] = False
        return m


def _check_effort(counts: CountTable, effort: EffortSpec) -> np.ndarray:
    if effort.n_sites != counts.space.n_sites:
        raise ValueError("effort does not cover every site")
    return np.asarray(effort.effort0, dtype=float)


def closed_form_mle(counts: CountTable, effort: EffortSpec) -> AbundanceEstimate:
    """MLE when every species shares the same standardized detectability.

    ::

        N[i, j] = (X[i,j,0] + X[i,j,1]) / (X[#,j,0] + X[#,j,1]) * X[#,j,0] / E[j,0]
        E1[j]   = E[j,0] * X[#,j,1] / X[#,j,0]

    Sites with ``X[#,j,0] == 0`` are excluded.
    """
    e0 = _check_effort(counts, effort)
    if not np.all(counts.monitored):
        raise ValueError("closed form requires every species monitored in both datasets")
    X0 = counts.dataset(STD).astype(float)
    X1 = counts.dataset(OPP).astype(float)
    s0 = X0.sum(axis=0)
    s1 = X1.sum(axis=0)
    ok = s0 > 0
    values = np.zeros_like(X0)
    values[:, ok] = (X0[:, ok] + X1[:, ok]) / (s0[ok] + s1[ok]) * (s0[ok] / e0[ok])
    e1 = np.zeros_like(e0)
    e1[ok] = e0[ok] * s1[ok] / s0[ok]
    return AbundanceEstimate(
        "closed_form",
        values,
        excluded_sites=frozenset(np.flatnonzero(~ok).tolist()),
        e1=e1,
    )


def fixed_point_mle(
    counts: CountTable,
    effort: EffortSpec,
    p0,
    tol: float = 1e-10,
    max_iterations: int = 100_000,
) -> AbundanceEstimate:
    """Solve the likelihood equations for known ``P~[i, 0]`` by alternation.

    Iterates, independently per site::

        N[i, j] = (X[i,j,0] + X[i,j,1]) / (p0[i] * E[j,0] + E1[j])
        E1[j]   = X[#,j,1] / N[#,j]

    until the largest relative change, and its extrapolation to the
    limit of the linearly converging sequence, are below ``tol``.  A
    damping factor of 0.5 is switched on if the change grows twice in a
    row.

    Plain alternation contracts slowly when ``E1`` dominates ``p0 * E0``,
    so the iteration starts from the root of the per-site equation
    obtained by substituting the first update into the second.
    """
    e0 = _check_effort(counts, effort)
    p0 = np.asarray(p0, dtype=float)
    I, J = counts.space.n_species, counts.space.n_sites
    if p0.shape != (I,) or np.any(p0 < 0) or not np.any(p0 > 0):
        raise ValueError("p0 must be non-negative, one per species, not all zero")
    mon0 = counts.monitored[:, STD]
    if np.any(p0[~mon0] > 0):
        raise ValueError("species not monitored in dataset 0 must have p0 == 0")

    X0 = counts.dataset(STD).astype(float)
    X1 = counts.dataset(OPP).astype(float)
    num = X0 + X1
    s0 = X0.sum(axis=0)
    s1 = X1.sum(axis=0)
    # no standardized mass at the site: only N = 0 solves the equations
    ok = (X0[p0 > 0].sum(axis=0) > 0)
    pe = p0[:, None] * e0[None, :]

    e1 = _e1_start(num, pe, s1, ok)

    def update_n(e1):
        den = pe + e1[None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(num > 0, num / den, 0.0)

    n = update_n(e1)
    damping = 1.0
    history: list[float] = []
    iterations = 0
    converged = False
    for iterations in range(1, max_iterations + 1):
        ntot = n.sum(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            e1_new = np.where(ok & (ntot > 0), s1 / ntot, 0.0)
        e1_next = damping * e1_new + (1.0 - damping) * e1
        n_next = update_n(e1_next)
        with np.errstate(divide="ignore", invalid="ignore"):
            ce = np.abs(e1_next - e1) / np.where(e1_next > 0, e1_next, 1.0)
            cn = np.abs(n_next - n) / np.where(n_next > 0, n_next, 1.0)
        change = float(max(ce[ok].max(initial=0.0), cn[:, ok].max(initial=0.0)))
        e1, n = e1_next, n_next
        history.append(change)
        if change < tol:
            # linear convergence: the remaining error is about change * rate / (1 - rate)
            rate = history[-1] / history[-2] if len(history) > 1 and history[-2] > 0 else 0.0
            if rate >= 1.0 or change * rate / (1.0 - rate) < tol or change == 0.0:
                converged = True
                break
        if (
            damping == 1.0
            and len(history) >= 3
            and history[-1] > history[-2] > history[-3]
        ):
            damping = 0.5
    if not converged:
        raise ConvergenceError(
            f"fixed-point iteration did not converge in {max_iterations} iterations "
            f"(last change {history[-1]:.3g})"
        )
    n[:, ~ok] = 0.0
    return AbundanceEstimate(
        "fixed_point",
        n,
        excluded_sites=frozenset(np.flatnonzero(~ok).tolist()),
        e1=e1,
        diagnostics={"iterations": iterations, "damping": damping},
    )


def _e1_start(num, pe, s1, ok) -> np.ndarray:
    # root of  sum_i num_i * E / (pe_i + E) = s1,  increasing in E
    e1 = np.zeros(num.shape[1])
    for j in np.flatnonzero(ok & (s1 > 0)):
        a, b = num[:, j], pe[:, j]
        if a[b == 0].sum() >= s1[j]:
            # no interior root: only species without standardized detection
            # carry opportunistic counts; leave it to the plain iteration
            e1[j] = s1[j] / a.sum() * b[b > 0].mean()
            continue
        a0 = a[b == 0].sum()
        a, b = a[b > 0], b[b > 0]

        def g(e):
            return float(np.sum(a * e / (b + e))) + a0 - s1[j]

        hi = 2.0 * b.max() * s1[j] / (a.sum() + a0 - s1[j])
        e1[j] = scipy.optimize.brentq(g, 0.0, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps)
    return e1


def fixed_point_residuals(counts: CountTable, effort: EffortSpec, p0, est: AbundanceEstimate):
    """Relative residuals of both likelihood equations at ``est``."""
    e0 = np.asarray(effort.effort0, dtype=float)
    p0 = np.asarray(p0, dtype=float)
    X0 = counts.dataset(STD).astype(float)
    X1 = counts.dataset(OPP).astype(float)
    n, e1 = est.values, est.e1
    keep = est.site_mask
    lhs_n = n * (p0[:, None] * e0[None, :] + e1[None, :])
    rn = np.abs(lhs_n - (X0 + X1))[:, keep] / np.maximum(X0 + X1, 1.0)[:, keep]
    re = np.abs(e1 * n.sum(axis=0) - X1.sum(axis=0))[keep] / np.maximum(X1.sum(axis=0), 1.0)[keep]
    return float(rn.max(initial=0.0)), float(re.max(initial=0.0))


def _per_site_divide(x, denom, name: str, tag: str) -> AbundanceEstimate:
    x = np.asarray(x, dtype=float)
    if denom is None:
        raise ValueError(f"{name} required")
    d = np.asarray(denom, dtype=float)
    if d.shape != (x.shape[1],):
        raise ValueError(f"{name} must have one entry per site")
    if np.any(~(d > 0)):
        raise ValueError(f"{name} must be positive")
    return AbundanceEstimate(tag, x / d[None, :])


def baseline_standardized(counts0, points0, tag: str = "a") -> AbundanceEstimate:
    """Counts per listening point: ``X[i, j] / pi[j]``.

    Also used for the reference survey with ``tag="s"``.
    """
    return _per_site_divide(counts0, points0, "points0", tag)


def baseline_area(counts1, areas) -> AbundanceEstimate:
    """Opportunistic counts per unit area: ``X[i, j] / S[j]``."""
    return _per_site_divide(counts1, areas, "site_area", "l1")


def baseline_totalcount(counts1) -> AbundanceEstimate:
    """Opportunistic counts over the site total: ``X[i, j] / X[#, j]``."""
    x = np.asarray(counts1, dtype=float)
    tot = x.sum(axis=0)
    ok = tot > 0
    values = np.zeros_like(x)
    values[:, ok] = x[:, ok] / tot[ok]
    return AbundanceEstimate("l2", values, excluded_sites=frozenset(np.flatnonzero(~ok).tolist()))
