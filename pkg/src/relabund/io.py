"""Canonical CSV layouts and JSON reports.

Counts files have the header ``dataset,species,site,count`` with optional
``habitat``, ``point_id`` and ``year`` columns; dataset values are
``std`` and ``opp``.  Effort files have the header ``site,effort`` with
optional ``area`` and ``points`` columns.

A species is monitored in a dataset when at least one row (zero counts
included) names it for that dataset.  Missing rows of a monitored species
are observed zeros.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, TextIO

import numpy as np

from .model import DATASET_LABELS, OPP, STD, CountTable, EffortSpec, IndexSpace, PointYearCounts

REQUIRED_COLUMNS = ("dataset", "species", "site", "count")
OPTIONAL_COLUMNS = ("habitat", "point_id", "year")
SCHEMA_VERSION = 1


class InputError(ValueError):
    """Malformed input; ``line`` is the 1-based line number when known."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


def _open_text(source) -> tuple[TextIO, str]:
    if isinstance(source, (str, Path)):
        return open(source, newline="", encoding="utf-8"), str(source)
    return source, getattr(source, "name", "<stream>")


@dataclass(frozen=True)
class _Row:
    line: int
    dataset: int
    species: str
    site: str
    count: int
    habitat: str | None
    point_id: str | None
    year: str | None


def _parse_rows(source) -> tuple[list[_Row], tuple[str, ...], str]:
    fh, name = _open_text(source)
    try:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError("empty file", name, 1) from None
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        unknown = [c for c in header if c not in REQUIRED_COLUMNS + OPTIONAL_COLUMNS]
        if missing or unknown or len(set(header)) != len(header):
            raise InputError(
                f"bad header {header}: required {list(REQUIRED_COLUMNS)}, optional {list(OPTIONAL_COLUMNS)}",
                name,
                1,
            )
        if ("point_id" in header) != ("year" in header):
            raise InputError("point_id and year columns must appear together", name, 1)
        col = {c: header.index(c) for c in header}
        rows = []
        for line, rec in enumerate(reader, start=2):
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) != len(header):
                raise InputError(f"expected {len(header)} fields, found {len(rec)}", name, line)
            rec = [f.strip() for f in rec]
            ds = rec[col["dataset"]]
            if ds not in DATASET_LABELS:
                raise InputError(f"unknown dataset label {ds!r}", name, line)
            try:
                count = int(rec[col["count"]])
            except ValueError:
                raise InputError(f"count {rec[col['count']]!r} is not an integer", name, line) from None
            if count < 0:
                raise InputError("negative count", name, line)
            sp, site = rec[col["species"]], rec[col["site"]]
            if not sp or not site:
                raise InputError("empty species or site label", name, line)
            opt = {c: (rec[col[c]] or None) if c in col else None for c in OPTIONAL_COLUMNS}
            k = DATASET_LABELS.index(ds)
            if k == OPP and (opt["point_id"] or opt["year"]):
                raise InputError("point_id/year only apply to the std dataset", name, line)
            if "habitat" in col and opt["habitat"] is None:
                raise InputError("empty habitat label", name, line)
            rows.append(_Row(line, k, sp, site, count, opt["habitat"], opt["point_id"], opt["year"]))
        return rows, tuple(header), name
    finally:
        if isinstance(source, (str, Path)):
            fh.close()


def _build_table(
    rows: list[_Row], name: str, unmonitored: Mapping[str, Iterable[str]] | None, strict: bool = True
) -> CountTable:
    species = list(OrderedDict.fromkeys(r.species for r in rows))
    sites = list(OrderedDict.fromkeys(r.site for r in rows))
    if not species:
        raise InputError("no data rows", name)
    space = IndexSpace(species, sites)
    I, J = space.n_species, space.n_sites
    sp_idx = {s: i for i, s in enumerate(species)}
    site_idx = {s: j for j, s in enumerate(sites)}
    counts = np.zeros((I, J, 2), dtype=np.int64)
    mon = np.zeros((I, 2), dtype=bool)
    with_prov = any(r.point_id is not None for r in rows)
    seen: dict = {}
    py_rows: OrderedDict = OrderedDict()
    for r in rows:
        key = (r.dataset, r.species, r.site, r.habitat, r.point_id, r.year)
        if key in seen:
            raise InputError(f"duplicate row (first seen on line {seen[key]})", name, r.line)
        seen[key] = r.line
        i, j = sp_idx[r.species], site_idx[r.site]
        counts[i, j, r.dataset] += r.count
        mon[i, r.dataset] = True
        if with_prov and r.dataset == STD:
            if r.point_id is None or r.year is None:
                raise InputError("std rows need point_id and year when provenance is given", name, r.line)
            py = py_rows.setdefault((j, r.point_id, r.year), np.zeros(I, dtype=np.int64))
            py[i] += r.count
    for ds, labels in (unmonitored or {}).items():
        k = DATASET_LABELS.index(ds)
        for lab in labels:
            if lab not in sp_idx:
                if not strict:
                    continue
                raise InputError(f"unmonitored species {lab!r} does not occur in the counts", name)
            i = sp_idx[lab]
            if counts[i, :, k].any():
                raise InputError(f"species {lab!r} declared unmonitored in {ds} but has counts", name)
            mon[i, k] = False
    prov = None
    if with_prov and py_rows:
        keys = list(py_rows)
        prov = PointYearCounts(
            np.array([k[0] for k in keys]),
            tuple(k[1] for k in keys),
            tuple(k[2] for k in keys),
            np.array([py_rows[k] for k in keys]),
        )
    try:
        return CountTable(space, counts, mon, provenance=prov)
    except ValueError as exc:
        raise InputError(str(exc), name) from None


def read_counts(
    source,
    habitat_pooling: bool = False,
    unmonitored: Mapping[str, Iterable[str]] | None = None,
) -> CountTable | dict[str, CountTable]:
    """Read a counts CSV.

    With ``habitat_pooling`` and a ``habitat`` column, returns one table
    per habitat stratum (keyed by habitat label, in order of appearance),
    each holding the sites that occur in that stratum.  Without pooling,
    habitat rows of the same cell are summed.
    """
    rows, header, name = _parse_rows(source)
    if habitat_pooling:
        if "habitat" not in header:
            raise InputError("habitat pooling requested but the file has no habitat column", name, 1)
        strata: OrderedDict = OrderedDict()
        for r in rows:
            strata.setdefault(r.habitat, []).append(r)
        return {h: _build_table(rs, name, unmonitored, strict=False) for h, rs in strata.items()}
    return _build_table(rows, name, unmonitored)


def write_counts(table: CountTable, dest=None) -> str:
    """Emit ``table`` in the canonical layout and return the text.

    Every likelihood cell is written, zeros included, so that reading the
    output back yields an equal table.  Standardized rows are split by
    point-year when the table carries provenance.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    space = table.space
    prov = table.provenance
    if prov is not None:
        w.writerow(REQUIRED_COLUMNS + ("point_id", "year"))
    else:
        w.writerow(REQUIRED_COLUMNS)
    I, J, _ = space.shape
    order = np.argsort(prov.site, kind="stable") if prov is not None else None
    # species-major order with the opportunistic block first keeps label
    # order intact on re-reading
    for i in range(I):
        for k in (OPP, STD):
            if not table.monitored[i, k]:
                continue
            ds = DATASET_LABELS[k]
            if k == STD and prov is not None:
                for r in order:
                    w.writerow((ds, space.species[i], space.sites[prov.site[r]], int(prov.counts[r, i]), prov.point_id[r], prov.year[r]))
                continue
            for j in range(J):
                row = (ds, space.species[i], space.sites[j], int(table.counts[i, j, k]))
                w.writerow(row + (("", "") if prov is not None else ()))
    text = buf.getvalue()
    if dest is not None:
        if isinstance(dest, (str, Path)):
            with open(dest, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        else:
            dest.write(text)
    return text


def read_effort(source, space: IndexSpace) -> EffortSpec:
    """Read ``site,effort[,area][,points]`` and align it with ``space``."""
    fh, name = _open_text(source)
    try:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError("empty effort file", name, 1) from None
        allowed = ("site", "effort", "area", "points")
        if "site" not in header or "effort" not in header or any(h not in allowed for h in header) or len(set(header)) != len(header):
            raise InputError(f"bad effort header {header}: need site,effort[,area][,points]", name, 1)
        col = {c: header.index(c) for c in header}
        values: dict = {c: {} for c in header if c != "site"}
        lines: dict = {}
        for line, rec in enumerate(reader, start=2):
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) != len(header):
                raise InputError(f"expected {len(header)} fields, found {len(rec)}", name, line)
            rec = [f.strip() for f in rec]
            site = rec[col["site"]]
            if site in lines:
                raise InputError(f"duplicate site {site!r} (first on line {lines[site]})", name, line)
            lines[site] = line
            for c in values:
                try:
                    v = float(rec[col[c]])
                except ValueError:
                    raise InputError(f"{c} {rec[col[c]]!r} is not a number", name, line) from None
                if not (v > 0 and math.isfinite(v)):
                    raise InputError(f"{c} must be positive and finite", name, line)
                values[c][site] = v
    finally:
        if isinstance(source, (str, Path)):
            fh.close()
    missing = [s for s in space.sites if s not in values["effort"]]
    if missing:
        raise InputError(f"no effort for sites {missing}", name)

    def vec(c):
        if c not in values:
            return None
        return np.array([values[c][s] for s in space.sites])

    return EffortSpec(vec("effort"), site_area=vec("area"), points0=vec("points"))


def write_effort(effort: EffortSpec, space: IndexSpace, dest=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["site", "effort"]
    if effort.site_area is not None:
        cols.append("area")
    if effort.points0 is not None:
        cols.append("points")
    w.writerow(cols)
    for j, s in enumerate(space.sites):
        row = [s, repr(float(effort.effort0[j]))]
        if effort.site_area is not None:
            row.append(repr(float(effort.site_area[j])))
        if effort.points0 is not None:
            row.append(repr(float(effort.points0[j])))
        w.writerow(row)
    text = buf.getvalue()
    if dest is not None:
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


# ----------------------------------------------------------------------
# JSON reports
# ----------------------------------------------------------------------


def to_jsonable(obj):
    """Convert numpy values to plain JSON types; non-finite floats become ``None``."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def matrix_block(values, rows: Iterable[str], cols: Iterable[str], row_axis="species", col_axis="site") -> dict:
    """Row-major matrix with explicit axis labels."""
    return {
        "axes": [row_axis, col_axis],
        row_axis: list(rows),
        col_axis: list(cols),
        "values": to_jsonable(np.asarray(values)),
    }


def dumps_report(report: dict) -> str:
    return json.dumps(to_jsonable(report), sort_keys=True, indent=2, allow_nan=False) + "\n"


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
