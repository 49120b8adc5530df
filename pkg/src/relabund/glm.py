"""Constrained Poisson log-linear fit of the two-dataset model.

On the log scale the model is a Poisson GLM with log link::

    log lambda[i, j, k] = n[i, j] + e[j, k] + p[i, k]

with ``e[j, 0]`` a known offset, ``p[i, 1] = 0`` and ``p[ref, 0] = 0``.
The free columns are every ``n[i, j]``, every ``e[j, 1]`` and ``p[i, 0]``
for the species monitored in the standardized dataset other than the
reference.

Each design row touches exactly one ``n`` column and at most one of the
``e``/``p`` columns, so the ``n`` block of the Fisher information is
diagonal.  :class:`_Information` eliminates it with a Schur complement,
leaving a dense system of size ``J + M0 - 1`` whatever the number of
species.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.sparse
from scipy.special import gammaln

from .model import OPP, STD, CountTable, EffortSpec, IndexSpace, ParameterSet

logger = logging.getLogger(__name__)

DISPERSION_MODES = ("poisson", "quasi_poisson")


class EstimationError(RuntimeError):
    """The likelihood cannot be maximized on this data."""


class DataInsufficiencyError(EstimationError):
    """Some parameters are not identified by the observed counts."""


@dataclass(frozen=True, eq=False)
class Penalty:
    """Quadratic proximity penalty ``nu * sum_i sum_j sum_m pi[j, m] (N~[i, j] - N~[i, m])**2``.

    The double sum runs over ordered site pairs, so every unordered pair
    is counted twice.
    """

    nu: float
    proximity: np.ndarray

    def __post_init__(self):
        pi = np.array(self.proximity, dtype=float)
        if self.nu < 0 or not np.isfinite(self.nu):
            raise ValueError("penalty strength must be a finite non-negative number")
        if pi.ndim != 2 or pi.shape[0] != pi.shape[1]:
            raise ValueError("proximity must be a square matrix")
        if np.any(pi < 0) or not np.allclose(pi, pi.T, rtol=0, atol=1e-12):
            raise ValueError("proximity must be symmetric and non-negative")
        if np.any(np.diag(pi) != 0):
            raise ValueError("proximity must have a zero diagonal")
        pi.flags.writeable = False
        object.__setattr__(self, "proximity", pi)

    @property
    def laplacian(self) -> np.ndarray:
        return np.diag(self.proximity.sum(axis=1)) - self.proximity

    def value(self, n_tilde: np.ndarray) -> float:
        n = np.asarray(n_tilde, dtype=float)
        if n.shape[1] != self.proximity.shape[0]:
            raise ValueError("proximity size does not match the number of sites")
        return float(2.0 * self.nu * np.sum((n @ self.laplacian) * n))


@dataclass(frozen=True)
class FitOptions:
    max_iterations: int = 100
    deviance_rel_tol: float = 1e-10
    score_tol: float = 1e-6
    step_halving_max: int = 30
    dispersion_mode: str = "poisson"
    penalty: Penalty | None = None
    compute_cov: bool = True

    def __post_init__(self):
        if self.max_iterations < 1 or self.step_halving_max < 0:
            raise ValueError("iteration limits must be positive")
        if not (self.deviance_rel_tol > 0 and self.score_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.dispersion_mode not in DISPERSION_MODES:
            raise ValueError(f"dispersion_mode must be one of {DISPERSION_MODES}")


@dataclass(frozen=True, eq=False)
class DesignSpec:
    """Likelihood rows and free columns of the constrained GLM.

    ``cells[r] = (i, j, k)`` is the cell behind row ``r``; ``col_n[r]`` is
    its ``n`` column and ``col_theta[r]`` its ``e``/``p`` column (``-1``
    for none).  ``e``/``p`` columns are numbered after the ``n`` block.
    """

    space: IndexSpace
    cells: np.ndarray
    offset: np.ndarray
    col_n: np.ndarray
    col_theta: np.ndarray
    labels: tuple[tuple, ...]
    n_index: np.ndarray
    e_index: np.ndarray
    p_index: np.ndarray
    effort0: np.ndarray
    reference: int
    p0_fixed: np.ndarray | None
    monitored0: np.ndarray
    separated: np.ndarray
    zero_opp_sites: np.ndarray
    boundary_species: np.ndarray

    @property
    def n_rows(self) -> int:
        return int(self.cells.shape[0])

    @property
    def n_cols(self) -> int:
        return len(self.labels)

    @property
    def n_n(self) -> int:
        return int(np.count_nonzero(self.n_index >= 0))

    @property
    def n_theta(self) -> int:
        return self.n_cols - self.n_n

    def matrix(self) -> np.ndarray:
        """Dense 0/1 incidence matrix, shape (rows, free columns)."""
        X = np.zeros((self.n_rows, self.n_cols))
        r = np.arange(self.n_rows)
        X[r, self.col_n] = 1.0
        has = self.col_theta >= 0
        X[r[has], self.col_theta[has]] = 1.0
        return X

    def response(self, counts: CountTable) -> np.ndarray:
        if counts.space != self.space:
            raise ValueError("counts do not match the design's index space")
        c = self.cells
        return counts.counts[c[:, 0], c[:, 1], c[:, 2]].astype(float)

    def linear_predictor(self, beta: np.ndarray) -> np.ndarray:
        eta = beta[self.col_n] + self.offset
        has = self.col_theta >= 0
        eta[has] += beta[self.col_theta[has]]
        return eta

    def xt(self, v: np.ndarray) -> np.ndarray:
        """``X.T @ v`` without forming X."""
        out = np.bincount(self.col_n, weights=v, minlength=self.n_cols)
        has = self.col_theta >= 0
        out += np.bincount(self.col_theta[has], weights=v[has], minlength=self.n_cols)
        return out

    def params_from_coef(self, beta: np.ndarray) -> ParameterSet:
        I, J = self.space.n_species, self.space.n_sites
        n = np.zeros((I, J))
        act = self.n_index >= 0
        n[act] = np.exp(beta[self.n_index[act]])
        e = np.zeros((J, 2))
        e[:, STD] = self.effort0
        ea = self.e_index >= 0
        e[ea, OPP] = np.exp(beta[self.e_index[ea]])
        p = np.ones((I, 2))
        if self.p0_fixed is not None:
            p[:, STD] = self.p0_fixed
        else:
            p[:, STD] = 0.0
            p[self.reference, STD] = 1.0
            pa = self.p_index >= 0
            p[pa, STD] = np.exp(beta[self.p_index[pa]])
        p[~self.monitored0 | self.boundary_species, STD] = 0.0
        return ParameterSet(n, e, p, reference=self.reference, fixed_p0=self.p0_fixed is not None)

    def coef_from_params(self, params: ParameterSet) -> np.ndarray:
        beta = np.zeros(self.n_cols)
        act = self.n_index >= 0
        with np.errstate(divide="ignore"):
            beta[self.n_index[act]] = np.log(params.n_tilde[act])
            ea = self.e_index >= 0
            beta[self.e_index[ea]] = np.log(params.e_tilde[ea, OPP])
            pa = self.p_index >= 0
            beta[self.p_index[pa]] = np.log(params.p_tilde[pa, STD])
        if not np.all(np.isfinite(beta)):
            raise ValueError("parameters have zeros on free coordinates")
        return beta


def _default_reference(monitored: np.ndarray) -> int:
    both = np.flatnonzero(monitored[:, STD] & monitored[:, OPP])
    if both.size == 0:
        raise ValueError("no species is monitored in both datasets")
    return int(both[0])


def build_design(
    counts: CountTable,
    effort: EffortSpec,
    reference: int | None = None,
    p0=None,
) -> DesignSpec:
    """Assemble the constrained design for ``counts``.

    Parameters
    ----------
    counts : CountTable
    effort : EffortSpec
        Known relative effort of the standardized dataset, one per site.
    reference : int, optional
        Index of the species with ``P~[ref, 0] = 1``.  Defaults to the
        first species monitored in both datasets.
    p0 : array_like, optional
        Known ``P~[i, 0]`` values.  When given they enter as offsets
        instead of free columns; they are rescaled so the reference
        species has value one.

    Raises
    ------
    ValueError
        Missing effort, or no species monitored in both datasets.
    DataInsufficiencyError
        A site with no standardized counts, or a species whose
        standardized detectability is unbounded.
    """
    space = counts.space
    I, J = space.n_species, space.n_sites
    if effort.n_sites != J:
        raise ValueError(f"effort has {effort.n_sites} sites, counts have {J}")
    mon = counts.monitored
    if not np.all(mon[:, OPP]):
        missing = [space.species[i] for i in np.flatnonzero(~mon[:, OPP])]
        raise ValueError(f"species must be monitored in the opportunistic dataset: {missing}")
    ref = _default_reference(mon) if reference is None else int(reference)
    if not (mon[ref, STD] and mon[ref, OPP]):
        raise ValueError("reference species must be monitored in both datasets")

    X0 = counts.dataset(STD)
    X1 = counts.dataset(OPP)
    mon0 = mon[:, STD].copy()

    p0_fixed = None
    boundary = np.zeros(I, dtype=bool)
    if p0 is not None:
        p0_fixed = np.asarray(p0, dtype=float).copy()
        if p0_fixed.shape != (I,):
            raise ValueError("p0 must have one entry per species")
        if np.any(p0_fixed[mon0] <= 0):
            raise ValueError("p0 must be positive for species monitored in dataset 0")
        p0_fixed[~mon0] = 0.0
        p0_fixed = p0_fixed / p0_fixed[ref]
        p0_fixed[ref] = 1.0
    else:
        tot0 = X0.sum(axis=1)
        tot1 = X1.sum(axis=1)
        if tot0[ref] == 0:
            raise DataInsufficiencyError(
                f"reference species {space.species[ref]!r} has no standardized counts"
            )
        boundary = mon0 & (tot0 == 0)
        boundary[ref] = False
        bad = mon0 & (tot0 > 0) & (tot1 == 0)
        bad[ref] = False
        if np.any(bad):
            names = [space.species[i] for i in np.flatnonzero(bad)]
            raise DataInsufficiencyError(
                f"species with standardized but no opportunistic counts: {names}"
            )

    used0 = mon0 & ~boundary
    site_tot0 = X0[used0].sum(axis=0)
    if np.any(site_tot0 == 0):
        names = [space.sites[j] for j in np.flatnonzero(site_tot0 == 0)]
        raise DataInsufficiencyError(f"sites with zero standardized counts: {names}")
    zero_opp = X1.sum(axis=0) == 0
    has0 = used0[:, None] & np.ones((1, J), dtype=bool)
    has1 = np.broadcast_to(~zero_opp[None, :], (I, J))
    tot_cell = np.where(has0, X0, 0) + np.where(has1, X1, 0)
    separated = tot_cell == 0

    n_index = np.full((I, J), -1, dtype=np.int64)
    act = ~separated
    n_index[act] = np.arange(np.count_nonzero(act))
    col = int(np.count_nonzero(act))
    labels: list[tuple] = [("n", int(i), int(j)) for i, j in zip(*np.nonzero(act))]
    e_index = np.full(J, -1, dtype=np.int64)
    for j in np.flatnonzero(~zero_opp):
        e_index[j] = col
        labels.append(("e", int(j)))
        col += 1
    p_index = np.full(I, -1, dtype=np.int64)
    if p0_fixed is None:
        for i in np.flatnonzero(used0):
            if i == ref:
                continue
            p_index[i] = col
            labels.append(("p", int(i)))
            col += 1

    log_e0 = np.log(effort.effort0)
    rows, offs, cn, ct = [], [], [], []
    for i in range(I):
        for j in range(J):
            if separated[i, j]:
                continue
            if has0[i, j]:
                off = log_e0[j] + (np.log(p0_fixed[i]) if p0_fixed is not None else 0.0)
                rows.append((i, j, STD))
                offs.append(off)
                cn.append(n_index[i, j])
                ct.append(p_index[i])
            if has1[i, j]:
                rows.append((i, j, OPP))
                offs.append(0.0)
                cn.append(n_index[i, j])
                ct.append(e_index[j])

    return DesignSpec(
        space=space,
        cells=np.array(rows, dtype=np.int64).reshape(-1, 3),
        offset=np.array(offs, dtype=float),
        col_n=np.array(cn, dtype=np.int64),
        col_theta=np.array(ct, dtype=np.int64),
        labels=tuple(labels),
        n_index=n_index,
        e_index=e_index,
        p_index=p_index,
        effort0=np.array(effort.effort0),
        reference=ref,
        p0_fixed=p0_fixed,
        monitored0=mon0,
        separated=separated,
        zero_opp_sites=zero_opp,
        boundary_species=boundary,
    )


class _Information:
    """Factorized ``X.T diag(w) X`` for a design; solves and inverts it."""

    def __init__(self, design: DesignSpec, w: np.ndarray):
        nn = design.n_n
        nt = design.n_theta
        self.nn = nn
        self.d = np.bincount(design.col_n, weights=w, minlength=nn)
        if np.any(self.d <= 0):
            raise DataInsufficiencyError("singular information matrix: empty abundance column")
        has = design.col_theta >= 0
        th = design.col_theta[has] - nn
        self.h_theta = np.bincount(th, weights=w[has], minlength=nt)
        self.B = scipy.sparse.csr_matrix(
            (w[has], (design.col_n[has], th)), shape=(nn, nt)
        )
        self.A = scipy.sparse.diags(1.0 / self.d) @ self.B
        S = np.diag(self.h_theta) - (self.B.T @ self.A).toarray()
        S = 0.5 * (S + S.T)
        if nt:
            try:
                self.chol = scipy.linalg.cho_factor(S, lower=True, check_finite=True)
            except (np.linalg.LinAlgError, ValueError):
                raise DataInsufficiencyError(
                    "singular working system after constraint absorption"
                ) from None
        else:
            self.chol = None

    def solve(self, g: np.ndarray) -> np.ndarray:
        gn, gt = g[: self.nn], g[self.nn :]
        if self.chol is None:
            return gn / self.d
        dt = scipy.linalg.cho_solve(self.chol, gt - self.A.T @ gn)
        dn = (gn - self.B @ dt) / self.d
        return np.concatenate([dn, dt])

    def inverse(self) -> np.ndarray:
        nn = self.nn
        if self.chol is None:
            return np.diag(1.0 / self.d)
        nt = self.h_theta.shape[0]
        S_inv = scipy.linalg.cho_solve(self.chol, np.eye(nt))
        A = self.A.toarray()
        AS = A @ S_inv
        cov = np.empty((nn + nt, nn + nt))
        cov[:nn, :nn] = AS @ A.T
        cov[np.arange(nn), np.arange(nn)] += 1.0 / self.d
        cov[:nn, nn:] = -AS
        cov[nn:, :nn] = -AS.T
        cov[nn:, nn:] = S_inv
        return 0.5 * (cov + cov.T)


def poisson_deviance(y: np.ndarray, mu: np.ndarray) -> float:
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(y > 0, y * np.log(y / mu), 0.0)
    return float(2.0 * np.sum(t - (y - mu)))


def poisson_loglik(y: np.ndarray, mu: np.ndarray) -> float:
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(y > 0, y * np.log(mu), 0.0)
    return float(np.sum(t - mu - gammaln(y + 1.0)))


@dataclass(frozen=True, eq=False)
class FitResult:
    """Maximum likelihood fit of the constrained model.

    ``coef_cov`` is the inverse Fisher information of the free log-scale
    coefficients, multiplied by ``dispersion`` in quasi-Poisson mode.
    ``separation_flags`` lists the ``(i, j)`` cells with no counts in
    either dataset; their abundance is set to zero.
    """

    params: ParameterSet
    coef: np.ndarray
    coef_cov: np.ndarray | None
    deviance: float
    loglik: float
    dispersion: float
    iterations: int
    converged: bool
    separation_flags: frozenset
    design: DesignSpec
    options: FitOptions
    score_max: float
    deviance_trace: tuple[float, ...] = field(default=())

    @property
    def df_resid(self) -> int:
        return self.design.n_rows - self.design.n_cols

    @property
    def n_tilde(self) -> np.ndarray:
        return self.params.n_tilde

    def se_log_n(self) -> np.ndarray:
        """Standard errors of ``log N~``; NaN for separated cells."""
        out = np.full(self.design.n_index.shape, np.nan)
        if self.coef_cov is None:
            return out
        act = self.design.n_index >= 0
        out[act] = np.sqrt(np.diag(self.coef_cov)[self.design.n_index[act]])
        return out

    def se_n(self) -> np.ndarray:
        """Delta-method standard errors of ``N~``."""
        return self.params.n_tilde * self.se_log_n()

    def _se_of(self, index: np.ndarray, values: np.ndarray) -> np.ndarray:
        out = np.full(index.shape, np.nan)
        if self.coef_cov is None:
            return out
        a = index >= 0
        out[a] = values[a] * np.sqrt(np.diag(self.coef_cov)[index[a]])
        return out

    def se_e1(self) -> np.ndarray:
        return self._se_of(self.design.e_index, self.params.e_tilde[:, OPP])

    def se_p0(self) -> np.ndarray:
        return self._se_of(self.design.p_index, self.params.p_tilde[:, STD])


def _pearson_dispersion(y: np.ndarray, mu: np.ndarray, df: int) -> float:
    if df <= 0:
        return float("nan")
    return float(np.sum((y - mu) ** 2 / mu) / df)


def fit(design: DesignSpec, counts: CountTable, options: FitOptions | None = None) -> FitResult:
    """Maximize the (optionally penalized) Poisson likelihood.

    The unpenalized problem is solved by IRLS with step-halving, started
    from one weighted least-squares pass on ``log(X + 0.5)``.  With a
    penalty, a trust-region Newton-CG search on the log-scale
    coefficients continues from the IRLS solution.
    """
    options = options or FitOptions()
    y = design.response(counts)
    total = float(y.sum())
    score_tol = options.score_tol * (1.0 + total)

    mu0 = y + 0.5
    info = _Information(design, mu0)
    beta = info.solve(design.xt(mu0 * (np.log(mu0) - design.offset)))

    def evaluate(b):
        with np.errstate(over="ignore"):
            mu = np.exp(design.linear_predictor(b))
        if not np.all(np.isfinite(mu)):
            return mu, np.inf
        return mu, poisson_deviance(y, mu)

    mu, dev = evaluate(beta)
    trace = [dev]
    converged = False
    iterations = 0
    score = design.xt(y - mu)
    for iterations in range(1, options.max_iterations + 1):
        step = _Information(design, mu).solve(score)
        t = 1.0
        for _ in range(options.step_halving_max + 1):
            cand = beta + t * step
            mu_c, dev_c = evaluate(cand)
            if dev_c <= dev or np.isclose(dev_c, dev, rtol=1e-13, atol=0):
                break
            t *= 0.5
        else:
            logger.warning("step-halving exhausted at iteration %d", iterations)
            break
        rel = abs(dev - dev_c) / (abs(dev_c) + 0.1)
        beta, mu = cand, mu_c
        dev = min(dev, dev_c)
        trace.append(dev_c)
        score = design.xt(y - mu)
        if rel < options.deviance_rel_tol and np.max(np.abs(score)) < score_tol:
            converged = True
            # one more full Newton step costs little and reaches machine precision
            # deviance is flat to rounding here, so judge the step by the score
            cand = beta + _Information(design, mu).solve(score)
            mu_c, dev_c = evaluate(cand)
            score_c = design.xt(y - mu_c)
            if np.isfinite(dev_c) and np.max(np.abs(score_c)) <= np.max(np.abs(score)):
                beta, mu, dev, score = cand, mu_c, dev_c, score_c
            break

    if options.penalty is not None and options.penalty.nu > 0:
        beta, mu, converged = _penalized_search(design, y, beta, options.penalty, score_tol)
        dev = poisson_deviance(y, mu)
        trace.append(dev)
        score = design.xt(y - mu)
        score_max = float(np.max(np.abs(score + _penalty_gradient(design, beta, options.penalty))))
    else:
        score_max = float(np.max(np.abs(score)))

    if not converged:
        logger.warning("IRLS did not converge in %d iterations", iterations)

    df = design.n_rows - design.n_cols
    dispersion = _pearson_dispersion(y, mu, df)
    cov = None
    if options.compute_cov:
        cov = _Information(design, mu).inverse()
        if options.dispersion_mode == "quasi_poisson":
            if not np.isfinite(dispersion):
                raise EstimationError("no residual degrees of freedom for the dispersion")
            cov = cov * dispersion

    sep = frozenset((int(i), int(j)) for i, j in zip(*np.nonzero(design.separated)))
    return FitResult(
        params=design.params_from_coef(beta),
        coef=beta,
        coef_cov=cov,
        deviance=dev,
        loglik=poisson_loglik(y, mu),
        dispersion=dispersion,
        iterations=iterations,
        converged=converged,
        separation_flags=sep,
        design=design,
        options=options,
        score_max=score_max,
        deviance_trace=tuple(trace),
    )


def _n_matrix(design: DesignSpec, beta: np.ndarray) -> np.ndarray:
    n = np.zeros(design.n_index.shape)
    act = design.n_index >= 0
    n[act] = np.exp(beta[design.n_index[act]])
    return n


def _penalty_gradient(design: DesignSpec, beta: np.ndarray, penalty: Penalty) -> np.ndarray:
    n = _n_matrix(design, beta)
    g = np.zeros_like(beta)
    act = design.n_index >= 0
    g[design.n_index[act]] = (4.0 * penalty.nu * n * (n @ penalty.laplacian))[act]
    return g


def _penalized_search(design, y, beta0, penalty: Penalty, gtol):
    L = penalty.laplacian
    nu = penalty.nu
    act = design.n_index >= 0
    idx = design.n_index[act]
    if L.shape[0] != design.space.n_sites:
        raise ValueError("proximity size does not match the number of sites")

    def fun(b):
        with np.errstate(over="ignore"):
            eta = design.linear_predictor(b)
            mu = np.exp(eta)
        n = _n_matrix(design, b)
        nl = n @ L
        f = float(np.sum(mu - y * eta)) + 2.0 * nu * float(np.sum(nl * n))
        g = design.xt(mu - y)
        g[idx] += (4.0 * nu * n * nl)[act]
        return f, g

    def hessp(b, v):
        mu = np.exp(design.linear_predictor(b))
        Xv = v[design.col_n].copy()
        has = design.col_theta >= 0
        Xv[has] += v[design.col_theta[has]]
        hv = design.xt(mu * Xv)
        n = _n_matrix(design, b)
        V = np.zeros_like(n)
        V[act] = v[idx]
        hp = 4.0 * nu * (n * (n @ L) * V + n * ((n * V) @ L))
        hv[idx] += hp[act]
        return hv

    res = scipy.optimize.minimize(
        fun,
        beta0,
        jac=True,
        hessp=hessp,
        method="trust-ncg",
        options={"gtol": gtol, "maxiter": 1000},
    )
    beta = res.x
    mu = np.exp(design.linear_predictor(beta))
    return beta, mu, bool(res.success)


def estimate_dispersion(result: FitResult, counts: CountTable) -> float:
    """Pearson ``X**2 / df`` of a fit, recomputed from ``counts``."""
    design = result.design
    df = design.n_rows - design.n_cols
    if df <= 0:
        raise EstimationError("non-positive residual degrees of freedom")
    y = design.response(counts)
    lam = result.params.intensities()
    c = design.cells
    mu = lam[c[:, 0], c[:, 1], c[:, 2]]
    return _pearson_dispersion(y, mu, df)


def likelihood_cells(counts: CountTable) -> np.ndarray:
    """Mask (I, J, 2) of the cells that enter the likelihood."""
    mon = counts.monitored
    return np.broadcast_to(mon[:, None, :], counts.counts.shape).copy()


def penalized_objective(
    design: DesignSpec,
    counts: CountTable,
    params: ParameterSet,
    nu: float,
    proximity,
) -> float:
    """Log-likelihood of ``params`` minus the proximity penalty on ``N~``.

    The log-likelihood runs over every cell whose species is monitored in
    the dataset, including the ``log X!`` terms.
    """
    penalty = Penalty(float(nu), proximity)
    if penalty.proximity.shape[0] != design.space.n_sites or params.shape != (
        design.space.n_species,
        design.space.n_sites,
    ):
        raise ValueError("dimension mismatch between design, parameters and proximity")
    mask = likelihood_cells(counts)
    y = counts.counts[mask].astype(float)
    mu = params.intensities()[mask]
    if np.any((mu == 0) & (y > 0)):
        return float("-inf")
    return poisson_loglik(y, mu) - penalty.value(params.n_tilde)


@dataclass(frozen=True)
class KernelInfo:
    """Rank analysis of the unconstrained design."""

    dimension: int
    expected: int
    n_intensities: int
    n_raw_parameters: int

    @property
    def overdetermined(self) -> bool:
        """True when ``I*J > 2*(I + J)``: more intensities than raw parameters."""
        return self.n_intensities > self.n_raw_parameters

    def __int__(self) -> int:
        return self.dimension


def unconstrained_incidence(I: int, J: int) -> np.ndarray:
    """0/1 design of ``log lambda = n[i,j] + e[j,k] + p[i,k]`` with every coefficient free.

    Rows are ordered ``(i, j, k)``; columns are ``n`` (I*J), ``e`` (2*J) and
    ``p`` (2*I).
    """
    X = np.zeros((2 * I * J, I * J + 2 * J + 2 * I))
    r = 0
    for i in range(I):
        for j in range(J):
            for k in (0, 1):
                X[r, i * J + j] = 1
                X[r, I * J + 2 * j + k] = 1
                X[r, I * J + 2 * J + 2 * i + k] = 1
                r += 1
    return X


def kernel_dimension_unconstrained(I: int, J: int) -> KernelInfo:
    """Kernel dimension of the unconstrained design, by explicit rank computation."""
    if I < 1 or J < 1:
        raise ValueError("I and J must be positive")
    X = unconstrained_incidence(I, J)
    rank = int(np.linalg.matrix_rank(X))
    info = KernelInfo(
        dimension=X.shape[1] - rank,
        expected=I + J + 1,
        n_intensities=2 * I * J,
        n_raw_parameters=I * J + 2 * (I + J),
    )
    if info.dimension != info.expected:
        raise AssertionError(f"kernel dimension {info.dimension} != I + J + 1 = {info.expected}")
    return info


def design_rank(design: DesignSpec) -> int:
    return int(np.linalg.matrix_rank(design.matrix()))
