"""Asymptotic variances of the combined estimator and their Monte Carlo check.

With ``S[j] = sum_l P~[l, 0] * N~[l, j]`` and the opportunistic effort
taken to infinity, the combined estimator has variance

    var(N[i, j]) = N~[i, j]**2 / (S[j] * E~[j, 0])

while the estimator built from the standardized dataset alone has
``N~[i, j] / (P~[i, 0] * E~[j, 0])``.  Their ratio is the reduction
factor ``P~[i, 0] * N~[i, j] / S[j]``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .estimators import ConvergenceError, closed_form_mle, fixed_point_mle
from .glm import EstimationError, FitOptions, build_design, fit
from .model import OPP, STD, CountTable, EffortSpec, IndexSpace, ParameterSet
from .simulate import make_rng


def _site_mass(params: ParameterSet) -> np.ndarray:
    return (params.p_tilde[:, STD, None] * params.n_tilde).sum(axis=0)


@dataclass(frozen=True, eq=False)
class VarianceReport:
    """Cellwise asymptotic variances.

    ``var_dataset0_only`` and ``reduction_factor`` are NaN where
    ``P~[i, 0] == 0``; ``undefined`` flags those cells.
    """

    var_combined: np.ndarray
    var_dataset0_only: np.ndarray
    reduction_factor: np.ndarray
    undefined: np.ndarray
    imaginary_ratio: np.ndarray | None = None


def asymptotic_variance(params: ParameterSet, effort: EffortSpec, p_imag=None) -> VarianceReport:
    e0 = np.asarray(effort.effort0, dtype=float)
    if e0.shape != (params.shape[1],):
        raise ValueError("effort does not match the number of sites")
    mass = _site_mass(params)
    if np.any(mass <= 0):
        raise ValueError("a site has no abundance among species monitored in dataset 0")
    n = params.n_tilde
    p0 = params.p_tilde[:, STD]
    var_c = n**2 / (mass * e0)[None, :]
    undefined = np.broadcast_to((p0 == 0)[:, None], n.shape).copy()
    with np.errstate(divide="ignore", invalid="ignore"):
        var0 = np.where(undefined, np.nan, n / (p0[:, None] * e0[None, :]))
    return VarianceReport(
        var_combined=var_c,
        var_dataset0_only=var0,
        reduction_factor=reduction_factor(params),
        undefined=undefined,
        imaginary_ratio=None if p_imag is None else imaginary_comparison(params, p_imag),
    )


def reduction_factor(params: ParameterSet) -> np.ndarray:
    """``P~[i, 0] * N~[i, j] / sum_l P~[l, 0] * N~[l, j]``; NaN where ``P~[i, 0] == 0``."""
    mass = _site_mass(params)
    if np.any(mass <= 0):
        raise ValueError("a site has no abundance among species monitored in dataset 0")
    p0 = params.p_tilde[:, STD]
    f = p0[:, None] * params.n_tilde / mass[None, :]
    f[p0 == 0] = np.nan
    return f


def imaginary_comparison(params: ParameterSet, p_imag) -> np.ndarray:
    """Variance ratio of the actual estimator to one where species ``i`` were also monitored.

    ``(p_imag[i] * N~[i, j] + S[j]) / S[j]``.
    """
    p_imag = np.asarray(p_imag, dtype=float)
    if p_imag.shape != (params.shape[0],) or np.any(p_imag < 0) or not np.all(np.isfinite(p_imag)):
        raise ValueError("p_imag must be one non-negative value per species")
    mass = _site_mass(params)
    if np.any(mass <= 0):
        raise ValueError("zero denominator: a site without monitored abundance")
    return (p_imag[:, None] * params.n_tilde + mass[None, :]) / mass[None, :]


# ----------------------------------------------------------------------
# Monte Carlo verification
# ----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class VarianceCheck:
    """Empirical against analytic variances over Monte Carlo replicates.

    ``ratio`` is empirical over analytic variance of the combined
    estimator and ``ratio_se`` its Monte Carlo standard error.
    ``reduction_ratio`` compares the empirical variance ratio of the
    combined and dataset-0-only estimators with the analytic reduction
    factor.  Assertions apply to ``eligible`` cells only (expected
    standardized count of at least ``min_expected``).
    """

    analytic: np.ndarray
    empirical: np.ndarray
    ratio: np.ndarray
    ratio_se: np.ndarray
    empirical0: np.ndarray
    reduction_ratio: np.ndarray
    expected_x0: np.ndarray
    eligible: np.ndarray
    passed: np.ndarray
    band: float
    replicates: int
    failures: int
    method: str

    @property
    def all_passed(self) -> bool:
        return bool(np.all(self.passed[self.eligible]))


def _variance_with_se(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unbiased variance along axis 0 and its standard error from the fourth moment."""
    R = samples.shape[0]
    dev = samples - samples.mean(axis=0)
    s2 = (dev**2).sum(axis=0) / (R - 1)
    m4 = (dev**4).mean(axis=0)
    se = np.sqrt(np.maximum(m4 - s2**2 * (R - 3) / (R - 1), 0.0) / R)
    return s2, se


def verify_variance_mc(
    true_params: ParameterSet,
    effort: EffortSpec,
    e1_scale: float,
    replicates: int,
    seed: int,
    threads: int = 1,
    band: float = 0.15,
    min_expected: float = 5.0,
    method: str = "auto",
) -> VarianceCheck:
    """Simulate, re-estimate with known ``P~[:, 0]`` and compare variances.

    The opportunistic effort of the simulation is ``e1_scale * E~[j, 0]``.
    Estimation uses the closed form when every ``P~[i, 0]`` is equal and
    the fixed-point solver with the true ``P~[:, 0]`` otherwise.
    ``method`` may force ``"closed_form"``, ``"glm"`` (``P~[:, 0]`` held
    fixed) or ``"fixed_point"``.
    Replicate ``r`` draws from stream ``(seed, r)`` so the output does not
    depend on ``threads``.
    """
    if replicates < 1000:
        raise ValueError("at least 1000 replicates are required")
    if e1_scale < 0:
        raise ValueError("e1_scale must be non-negative")
    I, J = true_params.shape
    e0 = np.asarray(effort.effort0, dtype=float)
    if not np.allclose(true_params.e_tilde[:, STD], e0, rtol=1e-12, atol=0):
        raise ValueError("true_params must carry the effort of dataset 0")
    p0 = np.asarray(true_params.p_tilde[:, STD])
    if method == "auto":
        method = "closed_form" if np.all(p0 == p0[0]) else "fixed_point"
    if method not in ("closed_form", "glm", "fixed_point"):
        raise ValueError(f"unknown method {method!r}")
    if method == "closed_form" and not np.all(p0 == p0[0]):
        raise ValueError("closed form requires equal P~[i, 0]")

    e_sim = np.column_stack([e0, e1_scale * e0])
    sim = ParameterSet(true_params.n_tilde, e_sim, true_params.p_tilde, true_params.reference)
    lam = sim.intensities()
    mon0 = p0 > 0
    space = IndexSpace.default(I, J)
    mon = np.column_stack([mon0, np.ones(I, dtype=bool)])
    if method == "closed_form":
        # the closed form needs every species monitored; equal p0 > 0 guarantees it
        mon[:, STD] = True
    scale = p0[0] if method == "closed_form" else 1.0
    options = FitOptions(compute_cov=False)

    def one(r: int):
        rng = make_rng(seed, r)
        x = rng.poisson(lam)
        table = CountTable(space, x, mon)
        try:
            if method == "closed_form":
                est = closed_form_mle(table, effort)
            elif method == "glm":
                res = fit(build_design(table, effort, p0=p0), table, options)
                if not res.converged:
                    return None
                return res.n_tilde, x[:, :, STD]
            else:
                est = fixed_point_mle(table, effort, p0)
        except (ConvergenceError, EstimationError):
            return None
        if est.excluded_sites:
            return None
        return est.values / scale, x[:, :, STD]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(replicates)))
    else:
        results = [one(r) for r in range(replicates)]
    ok = [res for res in results if res is not None]
    failures = replicates - len(ok)
    if failures > 0.01 * replicates:
        raise RuntimeError(f"estimator failed on {failures} of {replicates} replicates")

    nhat = np.stack([res[0] for res in ok])
    with np.errstate(divide="ignore", invalid="ignore"):
        nhat0 = np.stack([res[1] for res in ok]) / (p0[:, None] * e0[None, :])
    emp, emp_se = _variance_with_se(nhat)
    emp0, _ = _variance_with_se(np.where(mon0[None, :, None], nhat0, 0.0))
    emp0[~mon0] = np.nan

    report = asymptotic_variance(true_params, effort)
    if e1_scale == 0:
        analytic = report.var_dataset0_only
    else:
        analytic = report.var_combined
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = emp / analytic
        ratio_se = emp_se / analytic
        reduction_ratio = (emp / emp0) / report.reduction_factor
    expected_x0 = lam[:, :, STD]
    if e1_scale == 0 or not np.any(mon0):
        eligible = expected_x0 >= min_expected
    else:
        # unmonitored species have no standardized counts; use the site's standardized mass
        site_x0 = expected_x0.sum(axis=0)
        eligible = np.where(mon0[:, None], expected_x0 >= min_expected, site_x0[None, :] >= min_expected)
    eligible &= np.isfinite(ratio)
    passed = np.abs(ratio - 1.0) <= band
    return VarianceCheck(
        analytic=analytic,
        empirical=emp,
        ratio=ratio,
        ratio_se=ratio_se,
        empirical0=emp0,
        reduction_ratio=reduction_ratio,
        expected_x0=expected_x0,
        eligible=eligible,
        passed=passed,
        band=band,
        replicates=replicates,
        failures=failures,
        method=method,
    )
