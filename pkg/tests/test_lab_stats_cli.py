import json

import numpy as np
import pytest

from loopsoup.cli import main, parse_window, read_spec
from loopsoup.errors import ConfigurationError, DomainError
from loopsoup.io import atomic_writer, write_csv, write_json
from loopsoup.lab import (DecouplingExperiment, MonotoneLocalFunction, decoupling_defect, label_components,
                          local_uniqueness_stats, lu1_proxy, lu2_event, vacancy_curve, workers)
from loopsoup.lattice import Box
from loopsoup.rng import stream
from loopsoup.stats import EstimateRecord, merge_estimates, wilson_interval


@pytest.mark.parametrize("seed", range(5))
def test_unionfind_matches_ndimage(seed):
    m = np.random.default_rng(seed).random((9, 8, 7)) < 0.5
    a, na = label_components(m, "ndimage")
    b, nb = label_components(m, "unionfind")
    assert na == nb and np.array_equal(a, b)


@pytest.mark.parametrize("kind", ["site_occupied", "site_vacant", "occupied_fraction_ge", "vacant_crossing"])
def test_local_function_direction(kind):
    f = MonotoneLocalFunction(kind, (0, 0, 0), L=1)
    assert f.check_direction(stream(0, 1))


def test_decoupling_config_checks():
    f1 = MonotoneLocalFunction("site_occupied", (0, 0, 0))
    f2 = MonotoneLocalFunction("site_occupied", (3, 0, 0))
    with pytest.raises(ConfigurationError):
        DecouplingExperiment(0.5, 0.2, 1, 2, f1, f2)
    with pytest.raises(ConfigurationError):
        DecouplingExperiment(0.5, 1.5, 1, 3, f1, f2)


def test_decoupling_small_run():
    f1 = MonotoneLocalFunction("site_occupied", (0, 0, 0))
    f2 = MonotoneLocalFunction("site_occupied", (4, 0, 0))
    r = decoupling_defect(DecouplingExperiment(0.5, 0.2, 1, 4, f1, f2, replicates=4000, n_max=16, batch=2000))
    assert r["defect"] >= 0 and r["defect_ci"][0] <= r["defect_ci"][1]
    assert 0 < r["f1"] < 1


def test_lu2_hand_cases():
    n = 10
    v = np.ones((41,) * 3, dtype=bool)
    assert lu2_event(v, n)
    w = v.copy()
    w[:, 20, :] = False          # a wall splits both boxes
    assert not lu2_event(w, n)
    u = v.copy()
    u[5:36, 20, 5:36] = False    # the wall leaves a bridge outside B(0, n)
    assert lu2_event(u, n)
    with pytest.raises(DomainError):
        lu2_event(v[:-1], n)


def test_lu1_proxy():
    v = np.ones((21,) * 3, dtype=bool)
    assert lu1_proxy(v, 2, 10)
    v[8:13, 8:13, 8:13] = False
    v[10, 10, 10] = True
    assert not lu1_proxy(v[..., :], 0, 10)


def test_lu_stats_shape():
    r = local_uniqueness_stats(0.1, 4, 4, seed=1, which="both", n_max=16)
    assert r["lu2"]["n"] == 4 and r["lu1"]["n"] == 4


def test_vacancy_curve_alpha_zero():
    rows = vacancy_curve([0.0, 0.5], 2, 8, 200, seed=0)
    assert rows[0]["vacancy"] == 1.0 and rows[1]["vacancy"] < 1.0
    assert rows[1]["vacancy_lo"] <= rows[1]["oracle"] <= rows[1]["vacancy_hi"]


def test_workers_env(monkeypatch):
    monkeypatch.setenv("LOOPSOUP_WORKERS", "3")
    assert workers() == 3


def test_wilson_contains_mean():
    lo, hi = wilson_interval(30, 100)
    assert lo < 0.3 < hi
    assert wilson_interval(0, 50)[0] == 0.0


def test_merge_order_invariant():
    rng = np.random.default_rng(0)
    vals = [rng.random(50 + i) for i in range(6)]
    recs = [EstimateRecord.from_values("x", v, streams=[(0, i)]) for i, v in enumerate(vals)]
    a = merge_estimates(recs)
    b = merge_estimates(recs[::-1])
    allv = EstimateRecord.from_values("x", np.concatenate(vals))
    assert a == b
    assert a.n == allv.n and a.mean == pytest.approx(allv.mean, rel=1e-13)
    assert a.variance == pytest.approx(allv.variance, rel=1e-12)


def test_merge_rejects_shared_stream():
    r = EstimateRecord.from_values("x", [1.0, 2.0], streams=[(0, 0)])
    with pytest.raises(DomainError):
        merge_estimates([r, r])


def test_stream_independent_of_order():
    a = stream(5, 2).random(4)
    stream(5, 1).random(100)
    assert np.array_equal(a, stream(5, 2).random(4))
    assert not np.array_equal(a, stream(5, 3).random(4))


def test_atomic_writer_leaves_no_partial(tmp_path):
    p = tmp_path / "x.json"
    write_json(p, {"a": np.float64(0.5), "b": np.arange(2)})
    assert json.loads(p.read_text()) == {"a": 0.5, "b": [0, 1]}
    with pytest.raises(RuntimeError):
        with atomic_writer(p) as fh:
            fh.write("partial")
            raise RuntimeError
    assert json.loads(p.read_text())["a"] == 0.5
    assert [q.name for q in tmp_path.iterdir()] == ["x.json"]


def test_csv_roundtrip(tmp_path):
    write_csv(tmp_path / "a.csv", ["x", "y"], [[1, 0.1], [2, 1 / 3]])
    assert (tmp_path / "a.csv").read_text().splitlines()[2] == "2,0.3333333333333333"


def test_parse_window():
    assert parse_window("0") == Box((0, 0, 0), 0)
    assert parse_window("1,2,3:4") == Box((1, 2, 3), 4)


def test_cli_exit_codes(tmp_path):
    assert main(["bogus"]) == 2
    assert main(["ledger", "--zeta", "0.3", "--out", str(tmp_path / "l")]) == 2
    assert main(["ledger", "--out", str(tmp_path / "l")]) == 0
    assert json.loads((tmp_path / "l" / "ledger.json").read_text())["verdict"] == "PASS"
    assert main(["lu", "--n", "3", "--reps", "2", "--nmax", "0", "--out", str(tmp_path / "u")]) == 2


def test_cli_spec_file(tmp_path):
    spec = tmp_path / "s.txt"
    spec.write_text("alpha = 0.25\nreps = 50\n# comment\n")
    assert read_spec(spec) == {"alpha": "0.25", "reps": "50"}
    out = tmp_path / "o"
    assert main(["soup", "--spec", str(spec), "--reps", "40", "--out", str(out)]) == 0
    res = json.loads((out / "soup.json").read_text())
    assert res["reps"] == 40 and res["config"]["alpha"] == 0.25
    (tmp_path / "bad.json").write_text('{"nonsense": 1}')
    assert main(["soup", "--spec", str(tmp_path / "bad.json"), "--out", str(out)]) == 2


def test_alpha_surrogate_monotone_grid():
    from loopsoup.lab import alpha_surrogate
    r = alpha_surrogate([0.0, 0.1], 3, 0.5, 5, seed=2, n_max=8)
    assert r["alpha_star"] == 0.1 and [row["alpha"] for row in r["rows"]] == [0.0, 0.1]


def test_lu_stats_independent_of_workers(monkeypatch):
    a = local_uniqueness_stats(0.3, 3, 6, seed=3, n_max=12)
    monkeypatch.setenv("LOOPSOUP_WORKERS", "2")
    assert local_uniqueness_stats(0.3, 3, 6, seed=3, n_max=12) == a
