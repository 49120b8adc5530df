"""Core data types for the two-dataset relative abundance model.

Counts ``X[i, j, k]`` for species ``i``, site ``j`` and dataset ``k`` are
modelled as independent Poisson variables with mean

    lambda[i, j, k] = N[i, j] * E[j, k] * P[i, k]

where dataset ``k = 0`` is the standardized survey (relative effort known)
and ``k = 1`` the opportunistic one (effort unknown).  The raw parameters
are only identified up to a multiplicative gauge; :class:`ParameterSet`
stores them in the normalized form where

* ``E[j, 0]`` is the known relative effort,
* ``P[i, 1] = 1`` for every species,
* ``P[ref, 0] = 1`` for the reference species.

All arrays are stored on the natural scale and made read-only after
construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

STD = 0
OPP = 1
DATASET_LABELS = ("std", "opp")


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class IndexSpace:
    """Ordered labels for the species, site and dataset axes."""

    species: tuple[str, ...]
    sites: tuple[str, ...]
    datasets: tuple[str, str] = DATASET_LABELS

    def __post_init__(self):
        object.__setattr__(self, "species", tuple(str(s) for s in self.species))
        object.__setattr__(self, "sites", tuple(str(s) for s in self.sites))
        if not self.species or not self.sites:
            raise ValueError("need at least one species and one site")
        if len(self.datasets) != 2:
            raise ValueError("exactly two datasets are supported")
        for name, labels in (("species", self.species), ("site", self.sites)):
            if len(set(labels)) != len(labels):
                raise ValueError(f"duplicate {name} labels")

    @property
    def n_species(self) -> int:
        return len(self.species)

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_species, self.n_sites, 2)

    def species_index(self, label: str) -> int:
        try:
            return self.species.index(str(label))
        except ValueError:
            raise KeyError(f"unknown species {label!r}") from None

    def site_index(self, label: str) -> int:
        try:
            return self.sites.index(str(label))
        except ValueError:
            raise KeyError(f"unknown site {label!r}") from None

    @classmethod
    def default(cls, n_species: int, n_sites: int) -> "IndexSpace":
        return cls(
            tuple(f"sp{i + 1}" for i in range(n_species)),
            tuple(f"site{j + 1}" for j in range(n_sites)),
        )


@dataclass(frozen=True, eq=False)
class PointYearCounts:
    """Standardized counts kept at the (point, year) level.

    Each row is one surveyed listening point in one year, located in
    ``site[r]``, with per-species counts ``counts[r, :]``.
    """

    site: np.ndarray
    point_id: tuple[str, ...]
    year: tuple[str, ...]
    counts: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "site", _frozen(self.site, dtype=np.int64))
        object.__setattr__(self, "counts", _frozen(self.counts, dtype=np.int64))
        object.__setattr__(self, "point_id", tuple(str(p) for p in self.point_id))
        object.__setattr__(self, "year", tuple(str(y) for y in self.year))
        n = self.site.shape[0]
        if self.counts.ndim != 2 or self.counts.shape[0] != n:
            raise ValueError("counts must have one row per point-year")
        if len(self.point_id) != n or len(self.year) != n:
            raise ValueError("point_id and year must have one entry per row")
        if np.any(self.counts < 0):
            raise ValueError("negative point-year count")

    def __len__(self) -> int:
        return int(self.site.shape[0])

    def site_totals(self, n_sites: int) -> np.ndarray:
        """Per-species counts summed to the site level, shape (I, J)."""
        out = np.zeros((self.counts.shape[1], n_sites), dtype=np.int64)
        np.add.at(out.T, self.site, self.counts)
        return out

    def point_years_per_site(self, n_sites: int) -> np.ndarray:
        return np.bincount(self.site, minlength=n_sites)


@dataclass(frozen=True, eq=False)
class CountTable:
    """Dense view of the sparse count tensor ``X[i, j, k]``.

    Cells of a species that is not monitored in dataset ``k`` are held at
    zero and contribute nothing to the likelihood.  Cells that are
    missing from an input file for a monitored species are observed zeros.
    """

    space: IndexSpace
    counts: np.ndarray
    monitored: np.ndarray
    provenance: PointYearCounts | None = None

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.shape != self.space.shape:
            raise ValueError(f"counts shape {counts.shape} != {self.space.shape}")
        if not np.all(np.isfinite(counts)) or np.any(np.round(counts) != counts):
            raise ValueError("counts must be integers")
        if np.any(counts < 0):
            raise ValueError("negative count")
        monitored = np.asarray(self.monitored, dtype=bool)
        if monitored.shape != (self.space.n_species, 2):
            raise ValueError("monitored must have shape (I, 2)")
        if np.any(counts[~monitored[:, STD], :, STD]) or np.any(
            counts[~monitored[:, OPP], :, OPP]
        ):
            raise ValueError("non-zero count for a species not monitored in that dataset")
        if self.provenance is not None:
            totals = self.provenance.site_totals(self.space.n_sites)
            if totals.shape != counts[:, :, STD].shape or np.any(
                totals != counts[:, :, STD]
            ):
                raise ValueError("point-year provenance does not sum to the standardized counts")
        object.__setattr__(self, "counts", _frozen(counts, dtype=np.int64))
        object.__setattr__(self, "monitored", _frozen(monitored, dtype=bool))

    @classmethod
    def from_cells(
        cls,
        space: IndexSpace,
        cells: Mapping[tuple[int, int, int], int],
        monitored: np.ndarray | None = None,
    ) -> "CountTable":
        """Build a table from a sparse ``{(i, j, k): count}`` mapping.

        When ``monitored`` is omitted every species is taken as monitored
        in both datasets.
        """
        counts = np.zeros(space.shape, dtype=np.int64)
        for (i, j, k), x in cells.items():
            counts[i, j, k] = x
        if monitored is None:
            monitored = np.ones((space.n_species, 2), dtype=bool)
        return cls(space, counts, monitored)

    @classmethod
    def from_arrays(
        cls,
        x0,
        x1,
        monitored0: Sequence[bool] | None = None,
        space: IndexSpace | None = None,
    ) -> "CountTable":
        x0 = np.asarray(x0)
        x1 = np.asarray(x1)
        if space is None:
            space = IndexSpace.default(*x0.shape)
        mon = np.ones((space.n_species, 2), dtype=bool)
        if monitored0 is not None:
            mon[:, STD] = np.asarray(monitored0, dtype=bool)
        return cls(space, np.stack([x0, x1], axis=-1), mon)

    def __eq__(self, other) -> bool:
        if not isinstance(other, CountTable):
            return NotImplemented
        return (
            self.space == other.space
            and np.array_equal(self.counts, other.counts)
            and np.array_equal(self.monitored, other.monitored)
        )

    __hash__ = None

    def dataset(self, k: int) -> np.ndarray:
        """Counts of dataset ``k`` as an (I, J) matrix."""
        return self.counts[:, :, k]

    def column_sums(self, k: int) -> np.ndarray:
        """``X_#jk``: total count over species at each site, shape (J,)."""
        return self.counts[:, :, k].sum(axis=0)

    def cells(self) -> Iterator[tuple[int, int, int, int]]:
        """Yield ``(i, j, k, count)`` for every likelihood cell (zeros included)."""
        I, J, _ = self.space.shape
        for k in (STD, OPP):
            for i in range(I):
                if not self.monitored[i, k]:
                    continue
                for j in range(J):
                    yield i, j, k, int(self.counts[i, j, k])

    def with_standardized(
        self, x0: np.ndarray, provenance: PointYearCounts | None = None
    ) -> "CountTable":
        """Copy with the standardized counts replaced."""
        counts = np.array(self.counts)
        counts[:, :, STD] = x0
        return CountTable(self.space, counts, self.monitored, provenance)


@dataclass(frozen=True, eq=False)
class EffortSpec:
    """Known relative effort of the standardized dataset plus baseline covariates.

    ``effort0`` holds ``E[j, 0]`` up to a shared constant.  ``site_area``
    and ``points0`` (number of listening point-years) are only needed by
    the baseline estimators.
    """

    effort0: np.ndarray
    site_area: np.ndarray | None = None
    points0: np.ndarray | None = None

    def __post_init__(self):
        e = _frozen(self.effort0)
        if e.ndim != 1 or not np.all(np.isfinite(e)) or np.any(e <= 0):
            raise ValueError("effort0 must be a vector of positive reals")
        object.__setattr__(self, "effort0", e)
        for name in ("site_area", "points0"):
            v = getattr(self, name)
            if v is None:
                continue
            v = _frozen(v)
            if v.shape != e.shape or np.any(~(v > 0)):
                raise ValueError(f"{name} must be positive with one entry per site")
            object.__setattr__(self, name, v)

    @property
    def n_sites(self) -> int:
        return int(self.effort0.shape[0])

    @classmethod
    def uniform(cls, n_sites: int) -> "EffortSpec":
        return cls(np.ones(n_sites))


@dataclass(frozen=True, eq=False)
class ParameterSet:
    """Normalized parameters ``(N~, E~, P~)`` satisfying the gauge constraints.

    ``n_tilde`` is (I, J), ``e_tilde`` is (J, 2) and ``p_tilde`` is (I, 2).
    ``P~[i, 0] == 0`` marks a species not monitored in the standardized
    dataset.  ``N~[i, j] == 0`` is allowed for cells whose maximum
    likelihood estimate lies on the boundary.
    """

    n_tilde: np.ndarray
    e_tilde: np.ndarray
    p_tilde: np.ndarray
    reference: int = 0
    fixed_p0: bool = field(default=False)

    def __post_init__(self):
        n = _frozen(self.n_tilde)
        e = _frozen(self.e_tilde)
        p = _frozen(self.p_tilde)
        I, J = n.shape
        if e.shape != (J, 2) or p.shape != (I, 2):
            raise ValueError("inconsistent parameter shapes")
        for name, a in (("n_tilde", n), ("e_tilde", e), ("p_tilde", p)):
            if not np.all(np.isfinite(a)) or np.any(a < 0):
                raise ValueError(f"{name} must be finite and non-negative")
        if np.any(e[:, STD] <= 0):
            raise ValueError("standardized effort must be positive")
        if not np.allclose(p[:, OPP], 1.0, rtol=0, atol=0):
            raise ValueError("P~[i, 1] must equal 1 for every species")
        if not 0 <= self.reference < I:
            raise ValueError("reference species out of range")
        if p[self.reference, STD] != 1.0:
            raise ValueError("P~[ref, 0] must equal 1")
        object.__setattr__(self, "n_tilde", n)
        object.__setattr__(self, "e_tilde", e)
        object.__setattr__(self, "p_tilde", p)

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_tilde.shape

    @property
    def monitored0(self) -> np.ndarray:
        return self.p_tilde[:, STD] > 0

    def constraint_mask(self) -> dict[str, np.ndarray]:
        """Boolean masks of the entries pinned by the identifiability constraints."""
        I, J = self.shape
        e_fixed = np.zeros((J, 2), dtype=bool)
        e_fixed[:, STD] = True
        p_fixed = np.zeros((I, 2), dtype=bool)
        p_fixed[:, OPP] = True
        p_fixed[self.reference, STD] = True
        p_fixed[~self.monitored0, STD] = True
        if self.fixed_p0:
            p_fixed[:, STD] = True
        return {"n_tilde": np.zeros((I, J), dtype=bool), "e_tilde": e_fixed, "p_tilde": p_fixed}

    def intensities(self) -> np.ndarray:
        """All Poisson means as an (I, J, 2) array."""
        return (
            self.n_tilde[:, :, None]
            * self.e_tilde[None, :, :]
            * self.p_tilde[:, None, :]
        )


def normalize_parameters(raw_N, raw_E, raw_P, reference: int = 0) -> ParameterSet:
    """Map raw ``(N, E, P)`` to the constrained parameterization.

    Uses the first site as the effort anchor and ``reference`` as the
    species whose standardized detectability is pinned to one::

        N~[i, j] = N[i, j] * P[i, 1] * E[0, 0] * P[r, 0] / P[r, 1]
        E~[j, k] = E[j, k] / E[0, 0] * P[r, k] / P[r, 0]
        P~[i, k] = P[i, k] / P[i, 1] * P[r, 1] / P[r, k]

    The cellwise products ``N * E * P`` are preserved.
    """
    N = np.asarray(raw_N, dtype=float)
    E = np.asarray(raw_E, dtype=float)
    P = np.asarray(raw_P, dtype=float)
    I, J = N.shape
    if E.shape != (J, 2) or P.shape != (I, 2):
        raise ValueError("raw_E must be (J, 2) and raw_P must be (I, 2)")
    if np.any(~(N > 0)) or np.any(~(E > 0)):
        raise ValueError("raw N and E must be strictly positive")
    if np.any(~(P[:, OPP] > 0)) or np.any(P[:, STD] < 0):
        raise ValueError("raw P must be positive in the opportunistic dataset and non-negative otherwise")
    r = int(reference)
    if P[r, STD] <= 0:
        raise ValueError("reference species must be monitored in both datasets")
    n_tilde = N * (P[:, OPP] * E[0, STD] * P[r, STD] / P[r, OPP])[:, None]
    e_tilde = E / E[0, STD] * (P[r, :] / P[r, STD])[None, :]
    p_tilde = P / P[:, [OPP]] * (P[r, OPP] / P[r, :])[None, :]
    # exact constraint values, free of rounding
    p_tilde[:, OPP] = 1.0
    p_tilde[r, STD] = 1.0
    e_tilde[0, STD] = 1.0
    return ParameterSet(n_tilde, e_tilde, p_tilde, reference=r)


def intensity(params: ParameterSet, i: int, j: int, k: int) -> float:
    """Poisson mean of cell ``(i, j, k)``; zero when ``P~[i, k] == 0``."""
    I, J = params.shape
    if not (0 <= i < I and 0 <= j < J and k in (STD, OPP)):
        raise IndexError(f"cell ({i}, {j}, {k}) out of range")
    return float(params.n_tilde[i, j] * params.e_tilde[j, k] * params.p_tilde[i, k])


def relative_abundance(n_tilde, i: int, j: int, ref_site: int = 0) -> float:
    """``N~[i, j] / N~[i, ref_site]``, which equals ``N[i, j] / N[i, ref_site]``."""
    n = n_tilde.n_tilde if isinstance(n_tilde, ParameterSet) else np.asarray(n_tilde)
    denom = n[i, ref_site]
    if denom <= 0:
        raise ZeroDivisionError(f"species {i} has zero abundance at the reference site")
    return float(n[i, j] / denom)


def relative_abundances(n_tilde, ref_site: int = 0) -> np.ndarray:
    """Vectorized :func:`relative_abundance`; rows with zero reference are NaN."""
    n = np.asarray(n_tilde, dtype=float)
    ref = n[:, [ref_site]]
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(ref > 0, n / np.where(ref > 0, ref, 1.0), np.nan)
    return out


def standardize_abundance(abund) -> tuple[np.ndarray, np.ndarray]:
    """Scale each species row to sum to one.

    Returns the standardized matrix and a boolean vector flagging rows
    whose sum is zero; flagged rows are left at zero and must be excluded
    from downstream correlations.
    """
    a = np.asarray(abund, dtype=float)
    if a.ndim != 2 or np.any(a < 0) or not np.all(np.isfinite(a)):
        raise ValueError("abundances must be a finite non-negative matrix")
    totals = a.sum(axis=1)
    degenerate = totals <= 0
    out = np.zeros_like(a)
    ok = ~degenerate
    out[ok] = a[ok] / totals[ok, None]
    return out, degenerate
