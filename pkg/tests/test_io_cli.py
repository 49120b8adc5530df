import io
import json

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from relabund.cli import main
from relabund.config import RunConfig, load_config
from relabund.estimators import closed_form_mle
from relabund.io import (
    InputError,
    dumps_report,
    read_counts,
    read_effort,
    to_jsonable,
    write_counts,
    write_effort,
)
from relabund.model import CountTable, EffortSpec, IndexSpace

MINIMAL = """dataset,species,site,count
std,a,s1,3
std,b,s1,0
std,a,s2,5
std,b,s2,2
opp,a,s1,10
opp,b,s1,4
opp,a,s2,7
opp,b,s2,9
"""


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


def _run(capsys, *argv):
    code = main(list(argv))
    return code, json.loads(capsys.readouterr().out)


def _fixture_table(rng, I=3, J=4):
    x0 = rng.integers(1, 30, (I, J))
    x1 = rng.integers(1, 60, (I, J))
    space = IndexSpace([f"sp{i}" for i in range(I)], [f"site{j}" for j in range(J)])
    return CountTable(space, np.stack([x0, x1], axis=2), np.ones((I, 2), bool))


class TestReadCounts:
    def test_minimal(self):
        table = read_counts(io.StringIO(MINIMAL))
        assert table.counts.shape == (2, 2, 2)
        assert table.counts.size == 8
        assert table.space.species == ("a", "b")
        assert table.counts[1, 1, 1] == 9

    def test_missing_zero_rows(self):
        full = read_counts(io.StringIO(MINIMAL))
        sparse = read_counts(io.StringIO(MINIMAL.replace("std,b,s1,0\n", "")))
        assert full == sparse

    @pytest.mark.parametrize(
        "bad,line",
        [
            ("std,a,s1,-1", 3),
            ("std,a,s1,x", 3),
            ("foo,a,s1,1", 3),
            ("std,a,s1", 3),
        ],
    )
    def test_malformed_rows(self, bad, line):
        text = "dataset,species,site,count\nstd,b,s1,1\n" + bad + "\nopp,a,s1,2\nopp,b,s1,2\n"
        with pytest.raises(InputError) as err:
            read_counts(io.StringIO(text))
        assert err.value.line == line

    def test_duplicate_row(self):
        with pytest.raises(InputError) as err:
            read_counts(io.StringIO(MINIMAL + "std,a,s1,1\n"))
        assert err.value.line == 10

    def test_bad_header(self):
        with pytest.raises(InputError):
            read_counts(io.StringIO("dataset,species,count\nstd,a,1\n"))

    def test_unmonitored_override(self):
        text = MINIMAL.replace("std,b,s1,0\n", "").replace("std,b,s2,2\n", "")
        table = read_counts(io.StringIO(text), unmonitored={"std": ["b"]})
        assert not table.monitored[1, 0]
        assert table.monitored[0, 0]

    def test_habitat_partition(self):
        text = (
            "dataset,species,site,count,habitat\n"
            "std,a,s1,3,forest\nstd,b,s1,1,forest\nopp,a,s1,6,forest\nopp,b,s1,2,forest\n"
            "std,a,s1,4,open\nstd,b,s1,2,open\nopp,a,s1,5,open\nopp,b,s1,8,open\n"
            "std,a,s2,2,open\nstd,b,s2,7,open\nopp,a,s2,1,open\nopp,b,s2,3,open\n"
        )
        strata = read_counts(io.StringIO(text), habitat_pooling=True)
        assert list(strata) == ["forest", "open"]
        assert strata["forest"].space.sites == ("s1",)
        assert strata["open"].space.sites == ("s1", "s2")
        pooled = read_counts(io.StringIO(text))
        total = strata["forest"].counts.sum() + strata["open"].counts.sum()
        assert total == pooled.counts.sum()
        np.testing.assert_array_equal(
            pooled.counts[:, 0], strata["forest"].counts[:, 0] + strata["open"].counts[:, 0]
        )

    def test_provenance(self):
        text = (
            "dataset,species,site,count,point_id,year\n"
            "std,a,s1,3,p1,2001\nstd,b,s1,1,p1,2001\nstd,a,s1,2,p1,2002\nstd,b,s1,0,p1,2002\n"
            "opp,a,s1,6,,\nopp,b,s1,2,,\n"
        )
        table = read_counts(io.StringIO(text))
        assert len(table.provenance) == 2
        np.testing.assert_array_equal(table.dataset(0)[:, 0], [5, 1])


class TestRoundTrip:
    @settings(max_examples=40, deadline=None)
    @given(
        st.integers(1, 4),
        st.integers(1, 4),
        st.integers(0, 2**32 - 1),
        st.booleans(),
    )
    def test_write_then_read(self, I, J, seed, drop):
        rng = np.random.default_rng(seed)
        x0 = rng.integers(0, 20, (I, J))
        x1 = rng.integers(0, 20, (I, J))
        mon0 = np.ones(I, bool)
        if drop and I > 1:
            mon0[-1] = False
            x0[-1] = 0
        table = CountTable.from_arrays(x0, x1, mon0)
        again = read_counts(io.StringIO(write_counts(table)))
        assert again == table

    def test_effort_round_trip(self):
        space = IndexSpace.default(1, 3)
        eff = EffortSpec([1.0, 0.1 + 0.2, 3.0], site_area=[1.5, 2.0, 0.7], points0=[4.0, 5.0, 6.0])
        back = read_effort(io.StringIO(write_effort(eff, space)), space)
        np.testing.assert_array_equal(back.effort0, eff.effort0)
        np.testing.assert_array_equal(back.site_area, eff.site_area)
        np.testing.assert_array_equal(back.points0, eff.points0)

    def test_effort_missing_site(self):
        with pytest.raises(InputError):
            read_effort(io.StringIO("site,effort\nsite1,1.0\n"), IndexSpace.default(1, 2))


class TestJson:
    def test_nan_becomes_null(self):
        assert json.loads(dumps_report(to_jsonable({"v": np.array([1.0, np.nan])}))) == {"v": [1.0, None]}


class TestConfig:
    def test_unknown_key(self, tmp_path):
        path = _write(tmp_path / "c.yaml", "fit:\n  bogus: 1\n")
        with pytest.raises(Exception):
            load_config(path)

    def test_defaults(self):
        cfg = load_config(None)
        assert cfg.verify_variance.replicates == 5000
        assert cfg.validate_.replicates == 100

    def test_canonical_json_stable(self):
        assert RunConfig().canonical_json() == RunConfig().canonical_json()


class TestFitCommand:
    def test_matches_closed_form(self, tmp_path, capsys, rng):
        table = _fixture_table(rng)
        eff = EffortSpec([1.0, 1.5, 0.7, 2.0])
        counts = _write(tmp_path / "counts.csv", write_counts(table))
        effort = _write(tmp_path / "effort.csv", write_effort(eff, table.space))
        cfg = _write(tmp_path / "c.yaml", yaml.safe_dump({"fit": {"p0": "equal"}}))
        code, doc = _run(capsys, "fit", "--config", cfg, "--counts", counts, "--effort", effort)
        assert code == 0
        res = doc["result"]
        assert res["n_tilde"]["species"] == list(table.space.species)
        cf = closed_form_mle(table, eff)
        np.testing.assert_allclose(np.array(res["n_tilde"]["values"]), cf.values, rtol=1e-8)
        np.testing.assert_allclose(res["e_tilde_opp"]["values"], cf.e1, rtol=1e-8)
        assert doc["schema_version"] == 1 and doc["seed"] is None
        assert len(doc["config_hash"]) == 64

    def test_unmonitored_species_finite_se(self, tmp_path, capsys, rng):
        table = _fixture_table(rng)
        text = write_counts(table)
        text = "\n".join(l for l in text.splitlines() if not l.startswith("std,sp2,")) + "\n"
        counts = _write(tmp_path / "counts.csv", text)
        effort = _write(tmp_path / "effort.csv", write_effort(EffortSpec(np.ones(4)), table.space))
        cfg = _write(tmp_path / "c.yaml", yaml.safe_dump({"fit": {"unmonitored": {"std": ["sp2"]}}}))
        code, doc = _run(capsys, "fit", "--config", cfg, "--counts", counts, "--effort", effort)
        assert code == 0
        res = doc["result"]
        assert res["monitored"]["std"] == ["sp0", "sp1"]
        se = np.array(res["se_n_tilde"]["values"], dtype=float)
        assert np.all(np.isfinite(se[2])) and np.all(se[2] > 0)
        assert res["p_tilde_std"]["values"][2] == 0.0

    def test_malformed_exit_two(self, tmp_path, capsys):
        counts = _write(tmp_path / "bad.csv", "dataset,species,site,count\nstd,a,s1,1\nstd,a,s2,-4\n")
        effort = _write(tmp_path / "e.csv", "site,effort\ns1,1\ns2,1\n")
        code, doc = _run(capsys, "fit", "--counts", counts, "--effort", effort)
        assert code == 2
        assert doc["error"]["type"] == "input"
        assert doc["error"]["line"] == 3
        assert doc["error"]["file"].endswith("bad.csv")

    def test_missing_arguments(self, capsys):
        code, doc = _run(capsys, "fit")
        assert code == 2

    def test_habitat_pooling(self, tmp_path, capsys):
        rows = ["dataset,species,site,count,habitat"]
        for h, base in (("forest", 3), ("open", 8)):
            for k in ("std", "opp"):
                for s, sp in enumerate(("a", "b")):
                    for j, site in enumerate(("s1", "s2")):
                        rows.append(f"{k},{sp},{site},{base + s + 2 * j + (5 if k == 'opp' else 0)},{h}")
        counts = _write(tmp_path / "c.csv", "\n".join(rows) + "\n")
        effort = _write(tmp_path / "e.csv", "site,effort\ns1,1\ns2,2\n")
        cfg = _write(tmp_path / "c.yaml", "fit:\n  habitat_pooling: true\n")
        code, doc = _run(capsys, "fit", "--config", cfg, "--counts", counts, "--effort", effort)
        assert code == 0
        assert set(doc["result"]["strata"]) == {"forest", "open"}


SIM_CONFIG = {
    "simulate": {
        "scenario": {
            "kind": "cells",
            "n_tilde": [[10, 20, 5], [7, 3, 12]],
            "e_tilde": [[1, 4], [2, 6], [1.5, 2]],
            "p_tilde": [[1, 1], [0.5, 1]],
        }
    }
}


class TestSimulateCommand:
    def test_byte_identical(self, tmp_path, capsys):
        cfg = _write(tmp_path / "c.yaml", yaml.safe_dump(SIM_CONFIG))
        outs = []
        for n in range(2):
            out = tmp_path / f"o{n}.csv"
            code = main(["simulate", "--config", cfg, "--out", str(out), "--seed", "42"])
            assert code == 0
            outs.append((out.read_bytes(), capsys.readouterr().out))
        assert outs[0] == outs[1]
        code = main(["simulate", "--config", cfg, "--out", str(tmp_path / "o2.csv"), "--seed", "43"])
        assert (tmp_path / "o2.csv").read_bytes() != outs[0][0]
        capsys.readouterr()

    def test_output_reads_back(self, tmp_path, capsys):
        cfg = _write(tmp_path / "c.yaml", yaml.safe_dump(SIM_CONFIG))
        out = tmp_path / "o.csv"
        code, doc = _run(capsys, "simulate", "--config", cfg, "--out", str(out), "--seed", "1")
        assert code == 0
        table = read_counts(str(out))
        assert table.counts.shape == (2, 3, 2)
        assert doc["result"]["totals"]["std"] == int(table.dataset(0).sum())

    def test_survey_writes_effort(self, tmp_path, capsys):
        cfg = _write(
            tmp_path / "c.yaml",
            yaml.safe_dump({"simulate": {"scenario": {"kind": "survey", "n_species": 6, "n_sites": 8, "n_unmonitored": 2, "n_reference_sites": 4}}}),
        )
        out, eff = tmp_path / "o.csv", tmp_path / "e.csv"
        code, doc = _run(capsys, "simulate", "--config", cfg, "--out", str(out), "--effort", str(eff), "--seed", "3")
        assert code == 0
        table = read_counts(str(out))
        read_effort(str(eff), table.space)
        assert table.provenance is not None
        code, doc = _run(capsys, "subsample", "--counts", str(out), "--out", str(tmp_path / "sub.csv"), "--seed", "3")
        assert code == 0
        assert doc["result"]["point_years_after"] == 8

    def test_requires_section(self, capsys, tmp_path):
        code, doc = _run(capsys, "simulate", "--out", str(tmp_path / "x.csv"))
        assert code == 2


class TestVerifyVarianceCommand:
    def test_default_scenario(self, tmp_path, capsys):
        cfg = _write(tmp_path / "c.yaml", "verify_variance:\n  replicates: 1000\n")
        code, doc = _run(capsys, "verify-variance", "--config", cfg, "--seed", "5", "--threads", "2")
        assert code == 0
        res = doc["result"]
        assert len(res["cells"]) == 24
        assert res["method"] == "closed_form"
        cell = res["cells"][0]
        assert {"analytic", "empirical", "ratio", "ratio_se", "eligible", "pass"} <= set(cell)
        assert res["all_passed"] == all(c["pass"] for c in res["cells"] if c["eligible"])

    def test_rejects_few_replicates(self, tmp_path, capsys):
        cfg = _write(tmp_path / "c.yaml", "verify_variance:\n  replicates: 10\n")
        code, _ = _run(capsys, "verify-variance", "--config", cfg)
        assert code == 2


class TestValidateCommand:
    def test_report(self, tmp_path, capsys):
        cfg = _write(
            tmp_path / "c.yaml",
            yaml.safe_dump({"validate": {"replicates": 3, "scenario": {"n_species": 8, "n_sites": 15, "n_unmonitored": 2, "n_reference_sites": 10}}}),
        )
        outs = []
        for threads in ("1", "3"):
            out = tmp_path / f"v{threads}.json"
            assert main(["validate", "--config", cfg, "--seed", "2", "--threads", threads, "--out", str(out)]) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]
        doc = json.loads(outs[0])
        res = doc["result"]
        assert set(res["win_rate"]) == {"a", "l1", "l2"}
        groups = res["replicate0"]["reports"]["a+l"]["groups"]
        assert {"all", "monitored0", "unmonitored0"} <= set(groups)
        assert len(res["stability_medians"]) == 3


def test_negative_seed(capsys):
    code, doc = _run(capsys, "validate", "--seed", "-1")
    assert code == 2
